"""The personalized avatar model and its composition pipeline.

Canonical surfels (the average head) plus per-lifestage deltas decoded
from a blend of basis fields. ``moment_forward`` composes the static
head for one lifestage (or a convex mix of lifestages);
``render_view`` additionally warps it by a tracked template mesh and
renders it.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from .basis import (BasisBank, BlendWeights, blend_backward, blend_features,
                    compose_backward, compose_moment)
from .cameras import Camera
from .encoding import HashGridConfig
from .errors import InvalidParameterError
from .meshes import TriangleMesh
from .networks import DeformDeltas, DeformNetworks, deform_backward, deform_forward
from .rendering import GradientBuffer, RenderOutput, render
from .surfels import SurfelSet, init_from_template, num_sh_coeffs
from .template import TemplateModel, evaluate_template
from .warping import NearestTriangleIndex, warp_surfels, warp_surfels_backward

LifestageSpec = Union[int, Dict[int, float]]


@dataclass
class PersonalizedModel:
    surfels: SurfelSet
    bank: BasisBank
    blend: BlendWeights
    nets: DeformNetworks
    template: TemplateModel
    lifestage_names: List[str]
    scene_lo: np.ndarray
    scene_hi: np.ndarray
    sh_degree: int = 1
    _tri_index: Optional[NearestTriangleIndex] = field(default=None, repr=False)

    @classmethod
    def create(
        cls,
        template: TemplateModel,
        lifestage_names: List[str],
        num_bases: int,
        hash_config: HashGridConfig,
        rng: np.random.Generator,
        sh_degree: int = 1,
        init_opacity: float = 0.1,
        blend_jitter: float = 0.0,
        residual_dim: int = 16,
        hidden_feature_dim: int = 32,
        mlp_width: int = 64,
    ) -> "PersonalizedModel":
        template = template.copy()  # checkpoint saves round model state to
        # float32 in place; the caller's template must not be affected
        surfels = init_from_template(
            template.mean_mesh(), init_opacity=init_opacity,
            sh_degree=sh_degree)
        bank = BasisBank.create(num_bases, hash_config, rng)
        blend = BlendWeights.create(len(lifestage_names), num_bases,
                                    rng=rng, jitter=blend_jitter)
        nets = DeformNetworks.create(
            feature_dim=hash_config.output_dim,
            num_lifestages=len(lifestage_names),
            sh_coeffs_per_channel=num_sh_coeffs(sh_degree),
            rng=rng,
            residual_dim=residual_dim,
            hidden_feature_dim=hidden_feature_dim,
            width=mlp_width,
        )
        lo, hi = template.mean_mesh().bounds()
        margin = 0.75 * (hi - lo).max()
        return cls(
            surfels=surfels, bank=bank, blend=blend, nets=nets,
            template=template, lifestage_names=list(lifestage_names),
            scene_lo=lo - margin, scene_hi=hi + margin, sh_degree=sh_degree,
        )

    @property
    def num_lifestages(self) -> int:
        return len(self.lifestage_names)

    def canonical_mesh(self) -> TriangleMesh:
        return self.template.mean_mesh()

    def triangle_index(self) -> NearestTriangleIndex:
        if self._tri_index is None:
            self._tri_index = NearestTriangleIndex(self.canonical_mesh())
        return self._tri_index

    def invalidate_caches(self):
        """Drop derived caches after state mutation (e.g. the float32
        rounding a checkpoint save applies)."""
        self._tri_index = None

    def normalized_positions(self, centers: np.ndarray) -> np.ndarray:
        return (centers - self.scene_lo) / (self.scene_hi - self.scene_lo)

    def resolve_lifestage(self, spec: LifestageSpec):
        """Resolve an id or an {id: weight} mapping to (weights row,
        residual embedding). Mixes are normalized to a convex combination."""
        if isinstance(spec, (int, np.integer)):
            i = int(spec)
            if not 0 <= i < self.num_lifestages:
                raise InvalidParameterError(f"unknown lifestage id {i}")
            return self.blend.weights[i].copy(), \
                self.nets.residual_embeddings[i].copy()
        if not spec:
            raise InvalidParameterError("empty lifestage weighting")
        ids = []
        vals = []
        for k, v in spec.items():
            i = int(k)
            if not 0 <= i < self.num_lifestages:
                raise InvalidParameterError(f"unknown lifestage id {i}")
            if v < 0:
                raise InvalidParameterError("lifestage weights must be >= 0")
            ids.append(i)
            vals.append(float(v))
        vals = np.asarray(vals)
        s = vals.sum()
        if s <= 0:
            raise InvalidParameterError("lifestage weights sum to zero")
        vals = vals / s
        row = vals @ self.blend.weights[ids]
        emb = vals @ self.nets.residual_embeddings[ids]
        return row, emb

    # --- static (moment-specific) composition --------------------------------

    def moment_forward(self, spec: LifestageSpec):
        """Compose the static head for a lifestage. Returns
        (moment SurfelSet, deltas, cache-for-backward)."""
        row, emb = self.resolve_lifestage(spec)
        pos = self.normalized_positions(self.surfels.centers)
        feats, blend_cache = blend_features(self.bank, row, pos)
        lifestage = int(spec) if isinstance(spec, (int, np.integer)) else None
        if lifestage is not None:
            deltas, net_cache = deform_forward(self.nets, feats,
                                               lifestage=lifestage)
        else:
            deltas, net_cache = deform_forward(self.nets, feats,
                                               embedding=emb)
        moment, compose_cache = compose_moment(self.surfels, deltas)
        cache = {
            "blend_cache": blend_cache, "net_cache": net_cache,
            "compose_cache": compose_cache, "deltas": deltas,
            "lifestage": lifestage, "spec": spec,
        }
        return moment, deltas, cache

    def moment_backward(self, cache, d_moment: GradientBuffer,
                        d_deltas_extra: Optional[DeformDeltas] = None):
        """Chain gradients on the moment set (plus optional direct delta
        gradients, e.g. from the regularizer) back to every learnable
        group. Returns a dict of named gradients."""
        d_canon, d_deltas = compose_backward(cache["compose_cache"], d_moment)
        if d_deltas_extra is not None:
            d_deltas.centers += d_deltas_extra.centers
            d_deltas.orientations += d_deltas_extra.orientations
            d_deltas.log_scales += d_deltas_extra.log_scales
            d_deltas.opacity_logits += d_deltas_extra.opacity_logits
            d_deltas.color_coeffs += d_deltas_extra.color_coeffs
        d_blended, d_emb, d_deform_params, d_color_params = deform_backward(
            self.nets, cache["net_cache"], d_deltas)
        d_tables, d_weights_row, d_pos = blend_backward(
            self.bank, cache["blend_cache"], d_blended)
        # chain unit-cube normalization back to world centers
        d_canon.centers += d_pos / (self.scene_hi - self.scene_lo)
        d_canon.deltas = GradientBuffer(
            centers=d_deltas.centers, orientations=d_deltas.orientations,
            log_scales=d_deltas.log_scales,
            opacity_logits=d_deltas.opacity_logits,
            color_coeffs=d_deltas.color_coeffs)
        return {
            "surfels": d_canon,
            "deltas": d_deltas,
            "basis_tables": d_tables,
            "blend_row": d_weights_row,
            "embedding": d_emb,
            "deform_params": d_deform_params,
            "color_params": d_color_params,
            "lifestage": cache["lifestage"],
        }

    # --- full render path -----------------------------------------------------

    def render_view(
        self,
        camera: Camera,
        spec: LifestageSpec,
        shape_coeffs=None,
        expression_coeffs=None,
        head_pose=None,
        background=(0.0, 0.0, 0.0),
        far: float = 0.0,
        with_grad: bool = False,
        use_deform: bool = True,
    ):
        """Moment composition -> motion warp -> render.

        Returns (RenderOutput, chain cache or None). ``use_deform=False``
        skips the basis/network deltas (warm-up path)."""
        shape_coeffs = (np.zeros(self.template.num_shape)
                        if shape_coeffs is None else shape_coeffs)
        expression_coeffs = (np.zeros(self.template.num_expression)
                             if expression_coeffs is None
                             else expression_coeffs)
        head_pose = np.eye(4) if head_pose is None else head_pose
        if use_deform:
            moment, deltas, mcache = self.moment_forward(spec)
        else:
            moment = self.surfels
            deltas = DeformDeltas.zeros(self.surfels.count,
                                        num_sh_coeffs(self.sh_degree))
            mcache = None
        def_mesh = evaluate_template(self.template, shape_coeffs,
                                     expression_coeffs, head_pose)
        warped, tri, wcache = warp_surfels(
            moment, self.canonical_mesh(), def_mesh, self.triangle_index())
        out = render(warped, camera, background=background, far=far,
                     build_tape=with_grad)
        chain = None
        if with_grad:
            chain = {"mcache": mcache, "wcache": wcache, "deltas": deltas,
                     "tape": out.compositing_tape, "tri": tri}
        return out, chain

    def render_backward_chain(self, chain, output_grads: dict,
                              d_deltas_extra: Optional[DeformDeltas] = None):
        """Backward through render -> warp -> compose -> networks -> blend.

        Returns the named-gradient dict from ``moment_backward`` (or just
        surfel grads when the chain was built with use_deform=False)."""
        from .rendering import render_backward

        d_warped = render_backward(output_grads, chain["tape"])
        d_moment = warp_surfels_backward(chain["wcache"], d_warped)
        if chain["mcache"] is None:
            return {"surfels": d_moment, "deltas": None}
        return self.moment_backward(chain["mcache"], d_moment,
                                    d_deltas_extra=d_deltas_extra)
