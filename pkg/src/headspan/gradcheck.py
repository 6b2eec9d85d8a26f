"""Central finite-difference verification of every analytic gradient.

Each suite builds randomized micro-instances in double precision,
compares analytic gradients against central differences at step 1e-4
(relative tolerance 1e-3), and skips coordinates whose difference span
crosses a genuine discontinuity (the 3-sigma splat cutoff, a ReLU kink,
an L1 sign change), detected by comparing a discrete signature at the
two probe points.
"""

import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .cameras import orbit_camera
from .encoding import HashGrid, HashGridConfig, hash_encode, hash_encode_backward
from .losses import (MultiScaleSSIM, consistency_loss,
                     consistency_loss_backward, deform_regularization,
                     deform_regularization_backward, depth_loss,
                     depth_loss_backward, normal_loss, normal_loss_backward,
                     rgb_loss, rgb_loss_backward, ssim_loss,
                     ssim_loss_backward, LossWeights)
from .networks import DeformDeltas, DeformNetworks, deform_backward, deform_forward
from .rendering import render, render_backward
from .surfels import SurfelSet

H_STEP = 1e-4
RTOL = 1e-3
DENOM_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    checked: int
    skipped: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < RTOL

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} "
                f"({self.checked} coords, {self.skipped} skipped, "
                f"{self.seconds:.1f}s)")


def fd_compare(
    loss_fn: Callable[[], float],
    arrays: dict,
    analytic: dict,
    rng: np.random.Generator,
    samples_per_array: int = 10,
    h: float = H_STEP,
    signature_fn: Optional[Callable[[], np.ndarray]] = None,
):
    """Compare analytic grads against central differences on a random
    subset of coordinates of each named array (mutated in place)."""
    max_rel = 0.0
    checked = 0
    skipped = 0
    for name, arr in arrays.items():
        g = analytic[name]
        flat_idx = list(np.ndindex(arr.shape))
        if not flat_idx:
            continue
        take = min(samples_per_array, len(flat_idx))
        sel = rng.choice(len(flat_idx), size=take, replace=False)
        for k in sel:
            idx = flat_idx[k]
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss_fn()
            sig_p = signature_fn() if signature_fn else None
            arr[idx] = orig - h
            lm = loss_fn()
            sig_m = signature_fn() if signature_fn else None
            arr[idx] = orig + 0.5 * h
            lp2 = loss_fn()
            arr[idx] = orig - 0.5 * h
            lm2 = loss_fn()
            arr[idx] = orig
            if signature_fn and not np.array_equal(sig_p, sig_m):
                skipped += 1
                continue
            # Richardson extrapolation of the central difference cancels
            # the O(h^2) truncation term (matters for nearly edge-on
            # surfels whose loss is strongly curved)
            fd_h = (lp - lm) / (2 * h)
            fd_h2 = (lp2 - lm2) / h
            fd = (4.0 * fd_h2 - fd_h) / 3.0
            an = float(g[idx])
            denom = max(abs(fd), abs(an))
            if denom < DENOM_FLOOR:
                checked += 1
                continue
            max_rel = max(max_rel, abs(fd - an) / denom)
            checked += 1
    return max_rel, checked, skipped


# --- scene builders -----------------------------------------------------------


def _random_surfels(n, rng, sh_coeffs=4) -> SurfelSet:
    centers = rng.normal(0, 0.4, (n, 3))
    q = rng.normal(0, 1, (n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    ls = np.log(rng.uniform(0.12, 0.4, (n, 2)))
    logits = rng.normal(0, 1.0, n)
    coeffs = rng.normal(0, 0.2, (n, sh_coeffs, 3))
    return SurfelSet(centers, q, ls, logits, coeffs)


def check_renderer(seed: int = 0, scenes: int = 3, size: int = 20,
                   n_surfels: int = 10) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for _ in range(scenes):
        s = _random_surfels(n_surfels, rng)
        cam = orbit_camera((0, 0, 0), rng.uniform(-40, 40),
                           rng.uniform(-25, 25), 3.0, size, size)
        bg = rng.uniform(0, 1, 3)
        wc = rng.normal(0, 1, (size, size, 3))
        wn = rng.normal(0, 1, (size, size, 3))
        wd = rng.normal(0, 1, (size, size))
        wa = rng.normal(0, 1, (size, size))

        def loss():
            o = render(s, cam, background=bg, build_tape=False)
            return float(np.sum(o.color * wc) + np.sum(o.normal * wn)
                         + np.sum(o.depth * wd) + np.sum(o.alpha * wa))

        def signature():
            o = render(s, cam, background=bg, build_tape=True)
            t = o.compositing_tape
            # discrete state: which surfel hits which pixel, which alphas
            # sit at the clamp, which SH colors sit at the clip
            inside = t._arrays["pre"]["sh_cache"][4]
            return np.concatenate([
                t.pixel_ptr, t.surfel_idx,
                (t.alpha >= 0.999).astype(np.int64),
                inside.astype(np.int64).ravel(),
            ])

        out = render(s, cam, background=bg, build_tape=True)
        gb = render_backward(
            {"color": wc, "normal": wn, "depth": wd, "alpha": wa},
            out.compositing_tape)
        arrays = {
            "centers": s.centers, "orientations": s.orientations,
            "log_scales": s.log_scales, "opacity_logits": s.opacity_logits,
            "color_coeffs": s.color_coeffs,
        }
        analytic = {
            "centers": gb.centers, "orientations": gb.orientations,
            "log_scales": gb.log_scales,
            "opacity_logits": gb.opacity_logits,
            "color_coeffs": gb.color_coeffs,
        }
        m, c, sk = fd_compare(loss, arrays, analytic, rng,
                              samples_per_array=8, signature_fn=signature)
        worst = max(worst, m)
        checked += c
        skipped += sk
    return CheckResult("renderer", worst, checked, skipped, time.time() - t0)


def check_encoder(seed: int = 0) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    cfg = HashGridConfig(levels=5, table_size=2 ** 11, features_per_entry=3,
                         coarsest_resolution=4, finest_resolution=48)
    grid = HashGrid.random_init(cfg, rng, scale=0.5)
    pos = rng.uniform(0.1, 0.9, (5, 3))
    up = rng.normal(0, 1, (5, cfg.output_dim))

    def loss():
        return float(np.sum(hash_encode(grid, pos) * up))

    d_tables, d_pos = hash_encode_backward(grid, pos, up)

    # table coords sampled among touched entries to get nonzero gradients
    worst = 0.0
    touched = np.argwhere(np.abs(d_tables) > 1e-12)
    sel = touched[rng.choice(len(touched), size=min(12, len(touched)),
                             replace=False)]
    for lv, ti, f in sel:
        orig = grid.tables[lv, ti, f]
        grid.tables[lv, ti, f] = orig + H_STEP
        lp = loss()
        grid.tables[lv, ti, f] = orig - H_STEP
        lm = loss()
        grid.tables[lv, ti, f] = orig
        fd = (lp - lm) / (2 * H_STEP)
        an = d_tables[lv, ti, f]
        denom = max(abs(fd), abs(an), DENOM_FLOOR)
        worst = max(worst, abs(fd - an) / denom)
    checked = len(sel)
    skipped = 0

    # position coords: skip probes whose span crosses a cell boundary
    res = cfg.level_resolutions()
    for p in range(len(pos)):
        for ax in range(3):
            x = pos[p, ax]
            crosses = any(
                int((x - H_STEP) * r) != int((x + H_STEP) * r) for r in res)
            if crosses:
                skipped += 1
                continue
            orig = pos[p, ax]
            pos[p, ax] = orig + H_STEP
            lp = loss()
            pos[p, ax] = orig - H_STEP
            lm = loss()
            pos[p, ax] = orig
            fd = (lp - lm) / (2 * H_STEP)
            an = d_pos[p, ax]
            denom = max(abs(fd), abs(an))
            if denom < DENOM_FLOOR:
                checked += 1
                continue
            worst = max(worst, abs(fd - an) / denom)
            checked += 1
    return CheckResult("hash-encoder", worst, checked, skipped,
                       time.time() - t0)


def check_networks(seed: int = 0) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    nets = DeformNetworks.create(
        feature_dim=12, num_lifestages=3, sh_coeffs_per_channel=4,
        rng=rng, residual_dim=5, hidden_feature_dim=6, width=16)
    # give the zero-initialized layers nonzero values so every path carries
    # gradient signal
    nets.deform_mlp.weights[-1][:] = rng.normal(0, 0.2,
                                                nets.deform_mlp.weights[-1].shape)
    nets.color_mlp.weights[-1][:] = rng.normal(0, 0.2,
                                               nets.color_mlp.weights[-1].shape)
    nets.residual_embeddings[:] = rng.normal(0, 0.5,
                                             nets.residual_embeddings.shape)
    blended = rng.normal(0, 0.7, (7, 12))
    gw = {
        "centers": rng.normal(0, 1, (7, 3)),
        "orientations": rng.normal(0, 1, (7, 4)),
        "log_scales": rng.normal(0, 1, (7, 2)),
        "opacity_logits": rng.normal(0, 1, 7),
        "color_coeffs": rng.normal(0, 1, (7, 4, 3)),
    }

    def loss():
        d, _ = deform_forward(nets, blended, lifestage=1)
        return float(
            np.sum(d.centers * gw["centers"])
            + np.sum(d.orientations * gw["orientations"])
            + np.sum(d.log_scales * gw["log_scales"])
            + np.sum(d.opacity_logits * gw["opacity_logits"])
            + np.sum(d.color_coeffs * gw["color_coeffs"]))

    def signature():
        _, cache = deform_forward(nets, blended, lifestage=1)
        bits = [(a > 0).ravel() for a in cache["dcache"][1:-1]]
        bits += [(a > 0).ravel() for a in cache["ccache"][1:-1]]
        return np.concatenate(bits)

    deltas, cache = deform_forward(nets, blended, lifestage=1)
    upstream = DeformDeltas(
        centers=gw["centers"], orientations=gw["orientations"],
        log_scales=gw["log_scales"], opacity_logits=gw["opacity_logits"],
        color_coeffs=gw["color_coeffs"])
    d_blended, d_emb, (d_dws, d_dbs), (d_cws, d_cbs) = deform_backward(
        nets, cache, upstream)

    arrays = {"blended": blended,
              "embedding": nets.residual_embeddings[1]}
    analytic = {"blended": d_blended, "embedding": d_emb}
    for i, (w, b) in enumerate(zip(nets.deform_mlp.weights,
                                   nets.deform_mlp.biases)):
        arrays[f"deform_w{i}"] = w
        arrays[f"deform_b{i}"] = b
        analytic[f"deform_w{i}"] = d_dws[i]
        analytic[f"deform_b{i}"] = d_dbs[i]
    for i, (w, b) in enumerate(zip(nets.color_mlp.weights,
                                   nets.color_mlp.biases)):
        arrays[f"color_w{i}"] = w
        arrays[f"color_b{i}"] = b
        analytic[f"color_w{i}"] = d_cws[i]
        analytic[f"color_b{i}"] = d_cbs[i]
    m, c, sk = fd_compare(loss, arrays, analytic, rng, samples_per_array=8,
                          signature_fn=signature)
    return CheckResult("deform-networks", m, c, sk, time.time() - t0)


def check_losses(seed: int = 0, size: int = 8) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    pred = rng.uniform(0.05, 0.95, (size, size, 3))
    target = rng.uniform(0.05, 0.95, (size, size, 3))
    labels = rng.integers(0, 4, (size, size))
    weights = LossWeights()

    def run(name, loss_fn, arrays, analytic, signature_fn=None, samples=10):
        nonlocal worst, checked, skipped
        m, c, sk = fd_compare(loss_fn, arrays, analytic, rng,
                              samples_per_array=samples,
                              signature_fn=signature_fn)
        worst = max(worst, m)
        checked += c
        skipped += sk

    v, cache = rgb_loss(pred, target, labels, weights)
    run("rgb", lambda: rgb_loss(pred, target, labels, weights)[0],
        {"pred": pred}, {"pred": rgb_loss_backward(cache)},
        signature_fn=lambda: np.sign(pred - target).ravel())

    v, cache = ssim_loss(pred, target)
    run("ssim", lambda: ssim_loss(pred, target)[0],
        {"pred": pred}, {"pred": ssim_loss_backward(cache)})

    ms = MultiScaleSSIM(scales=3)
    v, cache = ms(pred, target)
    run("ms-ssim", lambda: ms(pred, target)[0],
        {"pred": pred}, {"pred": ms.backward(cache)})

    dpred = rng.uniform(1.0, 3.0, (size, size))
    dmesh = rng.uniform(1.0, 3.0, (size, size))
    mask = rng.uniform(0, 1, (size, size)) > 0.3
    v, cache = depth_loss(dpred, dmesh, mask)
    run("depth", lambda: depth_loss(dpred, dmesh, mask)[0],
        {"pred": dpred}, {"pred": depth_loss_backward(cache)},
        signature_fn=lambda: np.sign(dpred - dmesh).ravel())

    nr = rng.normal(0, 1, (size, size, 3))
    nr /= np.linalg.norm(nr, axis=-1, keepdims=True)
    npri = rng.normal(0, 1, (size, size, 3))
    npri /= np.linalg.norm(npri, axis=-1, keepdims=True)
    fg = rng.uniform(0, 1, (size, size)) > 0.2
    v, cache = normal_loss(nr, npri, fg)
    run("normal", lambda: normal_loss(nr, npri, fg)[0],
        {"pred": nr}, {"pred": normal_loss_backward(cache)},
        signature_fn=lambda: np.concatenate(
            [np.sign(nr[:, 1:] - nr[:, :-1]).ravel(),
             np.sign(nr[1:] - nr[:-1]).ravel()]))

    cam = orbit_camera((0, 0, 0), 0, 0, 2.5, size, size)
    dsm = 2.0 + 0.2 * rng.normal(0, 1, (size, size))
    v, cache = consistency_loss(nr, dsm, cam, fg)
    d_n, d_d = consistency_loss_backward(cache)
    run("consistency", lambda: consistency_loss(nr, dsm, cam, fg)[0],
        {"normal": nr, "depth": dsm}, {"normal": d_n, "depth": d_d})

    deltas = DeformDeltas(
        centers=rng.normal(0, 0.1, (6, 3)),
        orientations=rng.normal(0, 0.1, (6, 4)),
        log_scales=rng.normal(0, 0.1, (6, 2)),
        opacity_logits=rng.normal(0, 0.1, 6),
        color_coeffs=rng.normal(0, 0.1, (6, 4, 3)))
    v, cache = deform_regularization(deltas)
    g = deform_regularization_backward(cache)
    run("regularization", lambda: deform_regularization(deltas)[0],
        {"centers": deltas.centers, "colors": deltas.color_coeffs},
        {"centers": g.centers, "colors": g.color_coeffs},
        signature_fn=lambda: np.sign(deltas.flat_concat()))

    return CheckResult("losses", worst, checked, skipped, time.time() - t0)


def check_full_chain(seed: int = 0) -> CheckResult:
    """End-to-end gradient through blend -> networks -> compose -> warp ->
    render -> squared-pixel loss, for blend weights, residual embeddings,
    basis tables, and canonical surfel parameters."""
    from .encoding import HashGridConfig
    from .model import PersonalizedModel
    from .template import build_procedural_template

    t0 = time.time()
    rng = np.random.default_rng(seed)
    template = build_procedural_template(1)
    cfg = HashGridConfig(levels=3, table_size=2 ** 10, features_per_entry=2,
                         coarsest_resolution=4, finest_resolution=16)
    model = PersonalizedModel.create(
        template, ["young", "mid", "old"], num_bases=3, hash_config=cfg,
        rng=rng, blend_jitter=0.1, residual_dim=4, hidden_feature_dim=8,
        mlp_width=16)
    # break the zero init so deltas carry gradient signal everywhere
    model.nets.deform_mlp.weights[-1][:] = rng.normal(
        0, 0.05, model.nets.deform_mlp.weights[-1].shape)
    model.nets.color_mlp.weights[-1][:] = rng.normal(
        0, 0.05, model.nets.color_mlp.weights[-1].shape)
    model.nets.residual_embeddings[:] = rng.normal(
        0, 0.3, model.nets.residual_embeddings.shape)

    cam = orbit_camera((0, 0, 0), 10, 5, 3.0, 16, 16)
    expr = 0.3 * rng.normal(0, 1, template.num_expression)
    shp = 0.3 * rng.normal(0, 1, template.num_shape)
    target = rng.uniform(0, 1, (16, 16, 3))
    lifestage = 1

    def forward(with_grad=False):
        return model.render_view(
            cam, lifestage, shape_coeffs=shp, expression_coeffs=expr,
            background=(0.2, 0.2, 0.2), with_grad=with_grad)

    def loss():
        out, _ = forward()
        return float(np.sum((out.color - target) ** 2))

    def signature():
        out, _ = forward(with_grad=True)
        t = out.compositing_tape
        return np.concatenate([t.pixel_ptr, t.surfel_idx])

    out, chain = forward(with_grad=True)
    grads = model.render_backward_chain(
        chain, {"color": 2.0 * (out.color - target)})

    arrays = {
        "blend_row": model.blend.weights[lifestage],
        "embedding": model.nets.residual_embeddings[lifestage],
        "centers": model.surfels.centers,
        "opacity_logits": model.surfels.opacity_logits,
        "log_scales": model.surfels.log_scales,
        "color_coeffs": model.surfels.color_coeffs,
        "orientations": model.surfels.orientations,
    }
    analytic = {
        "blend_row": grads["blend_row"],
        "embedding": grads["embedding"],
        "centers": grads["surfels"].centers,
        "opacity_logits": grads["surfels"].opacity_logits,
        "log_scales": grads["surfels"].log_scales,
        "color_coeffs": grads["surfels"].color_coeffs,
        "orientations": grads["surfels"].orientations,
    }
    m, c, sk = fd_compare(loss, arrays, analytic, rng, samples_per_array=6,
                          signature_fn=signature)

    # a few touched basis-table entries
    worst = m
    for i, dt in grads["basis_tables"].items():
        touched = np.argwhere(np.abs(dt) > 1e-10)
        if not len(touched):
            continue
        sel = touched[rng.choice(len(touched), size=min(3, len(touched)),
                                 replace=False)]
        tables = model.bank.bases[i].tables
        for lv, ti, f in sel:
            orig = tables[lv, ti, f]
            tables[lv, ti, f] = orig + H_STEP
            lp = loss()
            sp = signature()
            tables[lv, ti, f] = orig - H_STEP
            lm = loss()
            sm = signature()
            tables[lv, ti, f] = orig
            if not np.array_equal(sp, sm):
                sk += 1
                continue
            fd = (lp - lm) / (2 * H_STEP)
            an = dt[lv, ti, f]
            denom = max(abs(fd), abs(an))
            if denom < DENOM_FLOOR:
                c += 1
                continue
            worst = max(worst, abs(fd - an) / denom)
            c += 1
    return CheckResult("full-chain", worst, c, sk, time.time() - t0)


ALL_CHECKS = (check_renderer, check_encoder, check_networks, check_losses,
              check_full_chain)


def run_all(seed: int = 0, verbose: bool = True) -> List[CheckResult]:
    results = []
    for fn in ALL_CHECKS:
        r = fn(seed)
        results.append(r)
        if verbose:
            print(r.line())
    return results
