import base64
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient

from logonet.dataset import synth_generate
from logonet.model import LogoNetConfig, init_model
from logonet.persistence import save_checkpoint, save_gallery
from logonet.retrieval import Gallery, build_gallery
from logonet.service import (ServiceState, create_app, load_snapshot)

TINY = dict(input_channels=1, input_size=8, first_kernel=3,
            stage_channels=(2,), embed_dim=2, attention_ratio=2,
            spatial_kernel=3)


@pytest.fixture(scope="module")
def stack(tmp_path_factory):
    """Dataset on disk, saved checkpoint + gallery, and a loaded app."""
    root = tmp_path_factory.mktemp("svc")
    manifest = synth_generate(4, 2, 16, 31, root / "data")
    model = init_model(LogoNetConfig(**TINY), 31)
    gallery = build_gallery(model, manifest.logos)
    checkpoint_path = root / "model.lgn1"
    gallery_path = root / "gallery.lgg1"
    save_checkpoint(model, checkpoint_path)
    save_gallery(gallery, gallery_path)
    state = ServiceState()
    state.swap(load_snapshot(checkpoint_path, gallery_path, root / "data"))
    client = TestClient(create_app(state), raise_server_exceptions=False)
    return dict(root=root, manifest=manifest, model=model, gallery=gallery,
                checkpoint=checkpoint_path, gallery_path=gallery_path,
                state=state, client=client)


def logo_png(stack, index=0):
    return stack["manifest"].logos[index].image_path.read_bytes()


def query_json(client, png, k=4):
    payload = {"image": base64.b64encode(png).decode("ascii")}
    return client.post(f"/query?k={k}", json=payload)


class TestHealth:
    def test_empty_state_reports_empty(self):
        client = TestClient(create_app(ServiceState()))
        body = client.get("/health").json()
        assert body == {"status": "empty", "model_fingerprint": None,
                        "gallery_size": 0}

    def test_loaded_state_reports_fingerprint_and_size(self, stack):
        body = stack["client"].get("/health").json()
        assert body["status"] == "ok"
        assert len(body["model_fingerprint"]) == 16
        assert body["gallery_size"] == 4


class TestQueryBeforeLoad:
    def test_query_gets_503_error_shape(self):
        client = TestClient(create_app(ServiceState()))
        response = query_json(client, b"not a png")
        assert response.status_code == 503
        assert set(response.json()) == {"error"}

    def test_thumbnail_gets_503(self):
        client = TestClient(create_app(ServiceState()))
        assert client.get("/thumbnail/x").status_code == 503


class TestQuery:
    def test_gallery_logo_ranks_itself_first_at_distance_zero(self, stack):
        response = query_json(stack["client"], logo_png(stack, 2))
        assert response.status_code == 200
        results = response.json()["results"]
        assert results[0]["instance_id"] == "logo0002"
        assert results[0]["distance"] == 0.0

    def test_distances_ascending_and_four_decimal(self, stack):
        results = query_json(stack["client"], logo_png(stack)).json()["results"]
        distances = [r["distance"] for r in results]
        assert distances == sorted(distances)
        assert all(round(d, 4) == d for d in distances)

    def test_k_limits_result_count(self, stack):
        assert len(query_json(stack["client"], logo_png(stack),
                              k=2).json()["results"]) == 2

    def test_k_equal_to_gallery_size_gives_full_ranking(self, stack):
        results = query_json(stack["client"], logo_png(stack),
                             k=4).json()["results"]
        assert sorted(r["instance_id"] for r in results) == [
            "logo0000", "logo0001", "logo0002", "logo0003"]

    def test_thumbnail_urls_point_at_the_thumbnail_route(self, stack):
        results = query_json(stack["client"], logo_png(stack)).json()["results"]
        for r in results:
            assert r["thumbnail_url"] == f"/thumbnail/{r['instance_id']}"

    def test_multipart_equals_json_byte_for_byte(self, stack):
        png = logo_png(stack, 1)
        via_json = query_json(stack["client"], png)
        via_form = stack["client"].post(
            "/query?k=4", files={"image": ("q.png", png, "image/png")})
        assert via_form.status_code == 200
        assert via_form.content == via_json.content

    def test_repeating_a_query_yields_identical_bytes(self, stack):
        png = logo_png(stack, 3)
        assert (query_json(stack["client"], png).content
                == query_json(stack["client"], png).content)


class TestQueryErrors:
    @pytest.mark.parametrize("k", [0, 5, -1])
    def test_k_out_of_range(self, stack, k):
        response = query_json(stack["client"], logo_png(stack), k=k)
        assert response.status_code == 400
        assert f"k {k} out of range 1..4" in response.json()["error"]

    def test_undecodable_image(self, stack):
        response = query_json(stack["client"], b"definitely not a png")
        assert response.status_code == 400
        assert "cannot decode image" in response.json()["error"]

    def test_bad_base64(self, stack):
        response = stack["client"].post("/query", json={"image": "@@@"})
        assert response.status_code == 400
        assert "base64" in response.json()["error"]

    def test_json_without_image_field(self, stack):
        response = stack["client"].post("/query", json={"sketch": "zzz"})
        assert response.status_code == 400
        assert "image" in response.json()["error"]

    def test_invalid_json_body(self, stack):
        response = stack["client"].post(
            "/query", content=b"{oops",
            headers={"content-type": "application/json"})
        assert response.status_code == 400

    def test_unsupported_content_type(self, stack):
        response = stack["client"].post(
            "/query", content=b"raw", headers={"content-type": "text/plain"})
        assert response.status_code == 400
        assert "content type" in response.json()["error"]


class TestThumbnail:
    def test_bytes_equal_the_on_disk_file(self, stack):
        logo = stack["manifest"].logos[0]
        response = stack["client"].get(f"/thumbnail/{logo.instance_id}")
        assert response.status_code == 200
        assert response.headers["content-type"] == "image/png"
        assert response.content == logo.image_path.read_bytes()

    def test_unknown_id_is_404(self, stack):
        response = stack["client"].get("/thumbnail/nope")
        assert response.status_code == 404
        assert "nope" in response.json()["error"]


class TestConcurrency:
    def test_32_identical_queries_get_identical_bytes(self, stack):
        png = logo_png(stack, 1)
        app = create_app(stack["state"])

        def one_query(_):
            with TestClient(app) as client:
                return query_json(client, png).content

        with ThreadPoolExecutor(max_workers=8) as pool:
            bodies = list(pool.map(one_query, range(32)))
        assert len(set(bodies)) == 1
        assert json.loads(bodies[0])["results"][0]["instance_id"] == "logo0001"


class TestReload:
    def test_swaps_fingerprint_atomically(self, stack, tmp_path):
        other = init_model(LogoNetConfig(**TINY), 99)
        gallery = build_gallery(other, stack["manifest"].logos)
        ckpt, gal = tmp_path / "m2.lgn1", tmp_path / "g2.lgg1"
        save_checkpoint(other, ckpt)
        save_gallery(gallery, gal)
        state = ServiceState()
        state.swap(load_snapshot(stack["checkpoint"], stack["gallery_path"]))
        client = TestClient(create_app(state))
        before = client.get("/health").json()["model_fingerprint"]
        response = client.post("/admin/reload", json={
            "checkpoint": str(ckpt), "gallery": str(gal)})
        assert response.status_code == 200
        after = client.get("/health").json()["model_fingerprint"]
        assert after == response.json()["model_fingerprint"] != before

    def test_bad_path_reports_reload_failure(self, stack):
        response = stack["client"].post("/admin/reload", json={
            "checkpoint": "/no/such.lgn1", "gallery": "/no/such.lgg1"})
        assert response.status_code == 400
        assert "reload failed" in response.json()["error"]

    def test_missing_body_field_is_400_with_error_shape(self, stack):
        response = stack["client"].post("/admin/reload", json={})
        assert response.status_code == 400
        assert "error" in response.json()


class TestFingerprintMismatch:
    def test_mismatch_is_logged_on_load_and_query(self, stack, tmp_path):
        forged = Gallery(instance_ids=stack["gallery"].instance_ids,
                         embeddings=stack["gallery"].embeddings,
                         fingerprint="f" * 16)
        path = tmp_path / "forged.lgg1"
        save_gallery(forged, path)
        state = ServiceState()
        state.swap(load_snapshot(stack["checkpoint"], path))
        warnings_logged = [line for line in state.log
                           if line.startswith("warning")]
        assert len(warnings_logged) == 1
        client = TestClient(create_app(state))
        assert query_json(client, logo_png(stack)).status_code == 200
        assert any("query served with gallery fingerprint" in line
                   for line in state.log)


class TestRequestLog:
    def test_queries_append_entries(self, stack):
        state = stack["state"]
        before = len(state.log)
        query_json(stack["client"], logo_png(stack))
        assert len(state.log) > before
        assert any(line.startswith("query k=") for line in state.log)
