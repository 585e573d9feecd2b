"""LogoNet: instance-level logo sketch retrieval at desk scale.

A weight-shared triple-branch embedding network with a large-kernel
first convolution and hybrid channel/spatial attention, trained with a
triplet loss and evaluated as gallery retrieval with acc@k.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, backward, no_grad
from .gradcheck import check_gradients

__all__ = ["Tensor", "Tape", "backward", "no_grad", "check_gradients",
           "__version__"]
