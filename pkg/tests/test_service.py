import concurrent.futures as cf
import io
import json

import httpx
import numpy as np
import pytest

from headspan.service import RenderService


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    """A tiny trained checkpoint behind a live service."""
    from conftest import make_tiny_trainer
    from headspan.data import generate_synthetic, load_dataset

    root = tmp_path_factory.mktemp("svc")
    generate_synthetic(root / "data", num_lifestages=3,
                       frames_per_lifestage=3, image_size=24, seed=8,
                       template_subdivisions=1)
    ds = load_dataset(root / "data" / "manifest.json")
    tr = make_tiny_trainer(ds, root / "run", warmup_iterations=4,
                           formal_iterations=8, num_bases=3)
    tr.warmup()
    for _ in range(8):
        tr.train_step(ds.sample_uniform(tr.rng, tr._train_pool))
    ckpt = root / "run" / "final.ckpt"
    tr.save(ckpt)
    svc = RenderService(str(ckpt), port=0, max_image_size=128)
    svc.start_background()
    client = httpx.Client(base_url=f"http://127.0.0.1:{svc.port}",
                          timeout=60)
    yield {"svc": svc, "client": client, "ds": ds, "ckpt": ckpt,
           "model": svc.snapshot.model}
    svc.shutdown()


class TestInfo:
    def test_lifestages_listed(self, served):
        info = served["client"].get("/model/info").json()
        assert len(info["lifestages"]) == 3
        assert info["lifestages"][0] == {"id": 0, "name": "stage00"}
        assert info["shape_coefficients"] == 4
        assert info["expression_coefficients"] == 6

    def test_active_basis_count_matches_mask(self, served):
        info = served["client"].get("/model/info").json()
        assert info["active_basis_count"] == \
            int(served["model"].bank.active_mask.sum())

    def test_unknown_route_404_json(self, served):
        r = served["client"].get("/model/unknown")
        assert r.status_code == 404
        assert "error" in r.json()


class TestRenderEndpoint:
    def test_render_returns_png_with_timing(self, served):
        r = served["client"].post("/render", json={
            "lifestage": 0, "camera": {"width": 32, "height": 32}})
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert float(r.headers["x-render-millis"]) > 0
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_invalid_lifestage_field_error(self, served):
        r = served["client"].post("/render", json={"lifestage": 77})
        assert r.status_code == 400
        doc = r.json()
        assert doc["field"] == "lifestage"

    def test_wrong_coeff_length_field_error(self, served):
        r = served["client"].post("/render", json={
            "lifestage": 0, "expression_coeffs": [0.1, 0.2]})
        assert r.status_code == 400
        assert r.json()["field"] == "expression_coeffs"

    def test_oversize_413(self, served):
        r = served["client"].post("/render", json={
            "lifestage": 0, "camera": {"width": 4096, "height": 4096}})
        assert r.status_code == 413

    def test_missing_lifestage_400(self, served):
        r = served["client"].post("/render", json={})
        assert r.status_code == 400

    def test_single_weight_equals_single_lifestage(self, served):
        cam = {"width": 28, "height": 28, "azimuth": 12.0}
        a = served["client"].post("/render", json={
            "lifestage_weights": {"1": 1.0}, "camera": cam})
        b = served["client"].post("/render", json={
            "lifestage": 1, "camera": cam})
        assert a.content == b.content

    def test_blended_row_is_row_mean(self, served):
        model = served["model"]
        row, emb = model.resolve_lifestage({0: 0.5, 1: 0.5})
        expect_row = (model.blend.weights[0] + model.blend.weights[1]) / 2
        expect_emb = (model.nets.residual_embeddings[0]
                      + model.nets.residual_embeddings[1]) / 2
        np.testing.assert_allclose(row, expect_row, atol=1e-15)
        np.testing.assert_allclose(emb, expect_emb, atol=1e-15)

    def test_weights_normalized_to_convex(self, served):
        model = served["model"]
        row1, _ = model.resolve_lifestage({0: 2.0, 1: 2.0})
        row2, _ = model.resolve_lifestage({0: 0.5, 1: 0.5})
        np.testing.assert_allclose(row1, row2, atol=1e-15)

    def test_identical_requests_identical_images(self, served):
        req = {"lifestage_weights": {"0": 0.3, "2": 0.7},
               "camera": {"width": 26, "height": 26, "elevation": 5.0}}
        outs = [served["client"].post("/render", json=req).content
                for _ in range(3)]
        assert outs[0] == outs[1] == outs[2]

    def test_concurrent_requests_consistent(self, served):
        req = {"lifestage": 2, "camera": {"width": 24, "height": 24}}

        def go(_):
            return served["client"].post("/render", json=req).content

        with cf.ThreadPoolExecutor(5) as ex:
            outs = list(ex.map(go, range(5)))
        assert all(o == outs[0] for o in outs)

    def test_recorded_frame_reproduces_cli_render(self, served, tmp_path):
        from headspan.cli import main

        ds = served["ds"]
        rec = ds.frames[ds.holdout_frames()[0]]
        png_path = tmp_path / "cli.png"
        assert main(["render", "--checkpoint", str(served["ckpt"]),
                     "--data", str(ds.manifest.root + "/manifest.json"),
                     "--frame", rec.frame_id, "--out", str(png_path)]) == 0
        r = served["client"].post("/render", json={
            "lifestage": rec.lifestage,
            "shape_coeffs": rec.shape_coeffs.tolist(),
            "expression_coeffs": rec.expression_coeffs.tolist(),
            "head_pose": rec.head_pose.tolist(),
            "camera": rec.camera.to_dict()})
        assert r.status_code == 200
        assert r.content == png_path.read_bytes()

    def test_reload_swaps_snapshot(self, served):
        before = served["client"].get("/model/info").json()
        r = served["client"].post("/model/reload",
                                  json={"checkpoint": str(served["ckpt"])})
        assert r.status_code == 200
        after = served["client"].get("/model/info").json()
        assert after == before

    def test_cors_headers(self, served):
        r = served["client"].get("/model/info")
        assert r.headers["access-control-allow-origin"] == "*"
        r = served["client"].request("OPTIONS", "/render")
        assert r.status_code == 204
