"""Edit-run orchestration: mask selection, soft groups, the two-stage
optimization loop, densify/prune, and multi-round chaining.

Stage 1 trains only the deformation field (Gaussian attributes frozen,
bit-identical); stage 2 additionally trains color/opacity/scale/rotation with
per-row soft-edit step scaling and periodic densify/prune. All randomness is
derived from (seed, round, iteration, camera) so identical runs replay
bit-identically.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .cameras import Camera
from .config import EditParams, EditSpec
from .errors import (ConfigurationError, EmptyMaskError,
                     GuidanceUnavailableError, StateError)
from .guidance import (DiffusionSchedule, GuidanceRequest, LatentCodec,
                       SourceEstimator, cfg_scale, drag_sds_losses,
                       guidance_correction, source_estimator_residual_loss)
from .optim import AdamGroups
from .render import (dilate_mask, dilation_radius_for, render, render_mask,
                     splat_render)
from .scene import (GaussianScene, MirroredScene, make_scene,
                    mark_new_primitives_masked, mirror, partition)
from .triplane import TriplaneDeformation, region_reg_loss

RUNNING, PAUSED, DONE, FAILED = "running", "paused", "done", "failed"

ATTR_GROUPS = ("color", "opacity", "scale", "rotation")


def project_centers(camera: Camera, positions: np.ndarray):
    """Vectorized center projection: (u, v, depth) arrays for all primitives."""
    p_cam = positions @ camera.rotation.T + camera.translation
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.cx + camera.fx * p_cam[:, 0] / z
        v = camera.cy + camera.fy * p_cam[:, 1] / z
    return u, v, z


def select_mask_frustum(scene: GaussianScene, views) -> np.ndarray:
    """Flags primitives whose projected center lies inside the rectangle in
    every provided view (intersection); behind-camera primitives excluded.

    views: iterable of (Camera, (u0, v0, u1, v1)).
    """
    views = list(views)
    if not views:
        raise ValueError("at least one view rectangle is required")
    flags = np.ones(len(scene), dtype=bool)
    for camera, rect in views:
        u0, v0, u1, v1 = (float(r) for r in rect)
        if not (0 <= u0 and u1 <= camera.width and 0 <= v0 and v1 <= camera.height):
            raise ValueError(f"rectangle {rect} outside image bounds")
        u, v, z = project_centers(camera, scene.positions.astype(np.float64))
        inside = (z > 0) & (u >= u0) & (u < u1) & (v >= v0) & (v < v1)
        flags &= inside
    if not flags.any():
        raise EmptyMaskError("frustum intersection selected no primitives")
    return flags


def build_soft_group(scene: GaussianScene, k: int) -> np.ndarray:
    """Unmasked primitives that are k-nearest neighbors of any masked one."""
    masked_idx, unmasked_idx = partition(scene)
    if masked_idx.size == 0:
        raise EmptyMaskError("soft group requires a non-empty masked set")
    if unmasked_idx.size == 0 or k <= 0:
        return np.empty(0, dtype=np.int64)
    pos = scene.positions.astype(np.float64)
    tree = cKDTree(pos)
    kq = min(k + 1, len(scene))
    _, nbrs = tree.query(pos[masked_idx], k=kq)
    nbrs = np.atleast_2d(nbrs)
    picked: set[int] = set()
    masked_set = set(int(i) for i in masked_idx)
    for row, qi in zip(nbrs, masked_idx):
        taken = 0
        for j in row:
            j = int(j)
            if j == int(qi):
                continue
            if taken >= k:
                break
            taken += 1
            if j not in masked_set:
                picked.add(j)
    return np.array(sorted(picked), dtype=np.int64)


def configure_learning_rates(params: EditParams, stage: int) -> dict[str, float]:
    """Per-group rate table; Gaussian attributes are frozen in stage 1."""
    lr = params.lr
    table = {
        "encoder": lr.encoder_stage1 if stage == 1 else lr.encoder_stage2,
        "decoder": lr.decoder,
        "y_null": lr.y_null,
        "source_estimator": lr.source_estimator,
        "color": 0.0 if stage == 1 else lr.color,
        "opacity": 0.0 if stage == 1 else lr.opacity,
        "scale": 0.0 if stage == 1 else lr.scale,
        "rotation": 0.0 if stage == 1 else lr.rotation,
    }
    return table


def soft_row_scale(n: int, masked_idx, soft_idx, mu: float) -> torch.Tensor:
    """Per-row Adam step multiplier: masked 1, soft neighbors mu, rest 0."""
    scale = torch.zeros(n, dtype=torch.float32)
    scale[torch.as_tensor(np.asarray(masked_idx, dtype=np.int64))] = 1.0
    if len(soft_idx):
        scale[torch.as_tensor(np.asarray(soft_idx, dtype=np.int64))] = mu
    return scale


@dataclass
class DensifyReport:
    pruned: int
    cloned: int
    split: int
    new_indices: list[int]
    n_before: int
    n_after: int
    new_all_masked: bool = True  # mask-closure check, recorded at event time


@dataclass
class LossRow:
    iteration: int
    s: float
    t: int
    lat: float
    img: float
    src: float
    rr: float
    total: float

    def as_tuple(self):
        return (self.iteration, self.s, self.t, self.lat, self.img,
                self.src, self.rr, self.total)


LOSS_COLUMNS = ("iteration", "s", "t", "L_lat", "L_img", "L_src", "L_RR", "total")


def loss_history_csv(rows: list[LossRow]) -> str:
    lines = [",".join(LOSS_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in r.as_tuple()))
    return "\n".join(lines) + "\n"


def densify_reports_csv(reports: list["DensifyReport"]) -> str:
    lines = ["event,n_before,n_after,pruned,cloned,split,new_all_masked"]
    for k, r in enumerate(reports):
        lines.append(f"{k},{r.n_before},{r.n_after},{r.pruned},{r.cloned},"
                     f"{r.split},{int(r.new_all_masked)}")
    return "\n".join(lines) + "\n"


class EditRun:
    """One two-stage drag optimization over a scene.

    The run owns the scene (single writer). Guidance comes from any object
    with respond(request, camera_index) -> GuidanceResponse.
    """

    def __init__(self, scene: GaussianScene, spec: EditSpec,
                 cameras: list[Camera], oracle_factory, round_index: int = 0):
        self.scene = scene
        self.spec = spec
        self.params = spec.params
        self.round_index = round_index
        self.status = RUNNING
        self.pause_reason: str | None = None
        self.diagnostic: dict | None = None
        self.iteration = 0
        self.stage = 1
        self.loss_history: list[LossRow] = []
        self.events: list[dict] = []
        self.densify_reports: list[DensifyReport] = []
        self.snapshot_lock = threading.Lock()

        self._resolve_mask(cameras)
        self.mirror: MirroredScene = mirror(scene)
        self.train_cameras = [c.scaled(self.params.render_width) for c in cameras]
        self.source_cameras = cameras

        self.schedule = DiffusionSchedule(self.params.diffusion_steps,
                                          self.params.beta_start,
                                          self.params.beta_end)
        self.codec = LatentCodec()

        n = len(scene)
        self.pos_base = torch.from_numpy(scene.positions.astype(np.float32))
        self.rot = torch.from_numpy(scene.rotations.astype(np.float32))
        self.log_scales = torch.from_numpy(scene.log_scales.astype(np.float32))
        self.opacity = torch.from_numpy(scene.opacity_logits.astype(np.float32))
        self.colors = torch.from_numpy(scene.colors.astype(np.float32))
        self.mask_bool = torch.from_numpy(scene.mask.astype(bool))
        self.extent = float(np.linalg.norm(scene.aabb[1] - scene.aabb[0]))

        gen = torch.Generator().manual_seed(self.params.seed * 9973 + round_index)
        self.model = TriplaneDeformation(scene.normalization_aabb(), generator=gen)

        self._build_caches()
        if not self.camera_deck:
            raise ConfigurationError(
                "no training camera sees all control points in front of it")

        h, w, c = self.codec.latent_shape(self.train_cameras[0].height,
                                          self.train_cameras[0].width)
        self.latent_shape = (h, w, c)
        self.estimator = SourceEstimator(len(self.train_cameras), self.latent_shape)
        for idx in self.camera_deck:
            z0 = self.codec.encode(torch.from_numpy(self.cache_x0[idx]))
            self.estimator.set_base(idx, z0)

        self.oracle = oracle_factory(self)

        self._refresh_partition()
        self.soft_idx = build_soft_group(scene, self.params.soft_k)
        self._build_optimizer(stage=1)

        self.deck_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([self.params.seed, round_index, 101])))
        self._deck: list[int] = []
        self._densify_events = 0
        self._grad_norm_acc = torch.zeros(n)
        self._grad_norm_count = 0
        self.snapshot = None
        self._publish_snapshot()
        self._emit_event()

    # ------------------------------------------------------------------ setup

    def _resolve_mask(self, cameras: list[Camera]) -> None:
        spec = self.spec
        if spec.mask_type == "flags":
            flags = np.asarray(spec.mask_flags, dtype=np.uint8)
            if flags.shape[0] != len(self.scene):
                raise ConfigurationError(
                    f"mask flags length {flags.shape[0]} != N={len(self.scene)}")
            self.scene.mask[:] = (flags != 0).astype(np.uint8)
        else:
            views = [(cameras[v["camera"]], v["rect"]) for v in spec.mask_views]
            self.scene.mask[:] = select_mask_frustum(self.scene, views)
        if not self.scene.mask.any():
            raise EmptyMaskError("edit spec resolved to an empty mask")

    def _build_caches(self) -> None:
        p = self.params
        self.cache_x0: dict[int, np.ndarray] = {}
        self.cache_mask: dict[int, np.ndarray] = {}
        self.cache_points: dict[int, list] = {}
        self.camera_deck: list[int] = []
        for idx, cam in enumerate(self.train_cameras):
            out = render(self.mirror.scene, None, cam, p.background)
            self.cache_x0[idx] = out.rgb
            m2d = render_mask(self.mirror, cam, p.mask_threshold)
            radius = dilation_radius_for(cam.width, p.dilation_base_radius)
            self.cache_mask[idx] = dilate_mask(m2d, radius).astype(np.float32)
            pts, visible = [], True
            for pair in self.spec.points:
                uvh = _project_or_none(cam, pair["handle"])
                uvt = _project_or_none(cam, pair["target"])
                if uvh is None or uvt is None:
                    visible = False
                    break
                pts.append({"handle": uvh, "target": uvt})
            if visible:
                self.cache_points[idx] = pts
                self.camera_deck.append(idx)

    def _refresh_partition(self) -> None:
        masked_idx, unmasked_idx = partition(self.scene)
        self.masked_idx = masked_idx
        self.unmasked_idx = unmasked_idx
        self.unmasked_idx_t = torch.from_numpy(unmasked_idx.astype(np.int64))
        self.mask_bool = torch.from_numpy(self.scene.mask.astype(bool))

    def _build_optimizer(self, stage: int) -> None:
        p = self.params
        rates = configure_learning_rates(p, stage)
        opt = AdamGroups()
        opt.add_group("encoder", self.model.encoder_parameters(),
                      rates["encoder"], eps=p.adam_eps_position)
        opt.add_group("decoder", self.model.decoder_parameters(),
                      rates["decoder"], eps=p.adam_eps_position)
        opt.add_group("y_null", [self.estimator.y_null], rates["y_null"],
                      eps=p.adam_eps_default)
        opt.add_group("source_estimator", [self.estimator.offsets],
                      rates["source_estimator"], eps=p.adam_eps_default)
        if stage == 2:
            scale = soft_row_scale(len(self.scene), self.masked_idx,
                                   self.soft_idx, p.soft_mu)
            for name, tensor in (("color", self.colors), ("opacity", self.opacity),
                                 ("scale", self.log_scales), ("rotation", self.rot)):
                tensor.requires_grad_(True)
                opt.add_group(name, [tensor], rates[name],
                              eps=p.adam_eps_default, row_scale=scale)
        self.optimizer = opt

    def _refresh_row_scales(self) -> None:
        if self.stage != 2:
            return
        scale = soft_row_scale(len(self.scene), self.masked_idx,
                               self.soft_idx, self.params.soft_mu)
        for name in ATTR_GROUPS:
            self.optimizer.set_row_scale(name, scale)

    # ------------------------------------------------------------ run control

    @property
    def total_iterations(self) -> int:
        return self.params.iterations

    @property
    def epoch_ratio(self) -> float:
        return self.iteration / self.total_iterations

    def request_pause(self, reason: str = "user") -> None:
        if self.status == RUNNING:
            self.status = PAUSED
            self.pause_reason = reason

    def resume(self) -> None:
        if self.status != PAUSED:
            raise StateError(f"cannot resume from status {self.status}")
        self.status = RUNNING
        self.pause_reason = None

    def _next_batch(self) -> list[int]:
        k = min(self.params.batch_size, len(self.camera_deck))
        if len(self._deck) < k:
            self._deck = [int(i) for i in
                          self.deck_rng.permutation(self.camera_deck)]
        batch, self._deck = self._deck[:k], self._deck[k:]
        return batch

    def _noise_for(self, iteration: int, cam_idx: int):
        ss = np.random.SeedSequence(
            [self.params.seed, self.round_index, iteration, cam_idx])
        rng = np.random.Generator(np.random.PCG64(ss))
        eps = rng.standard_normal(self.latent_shape, dtype=np.float32)
        return eps, int(ss.generate_state(1)[0])

    def step_once(self) -> None:
        if self.status != RUNNING:
            raise StateError(f"cannot step run in status {self.status}")
        i = self.iteration
        p = self.params
        if self.stage == 1 and i >= p.stage2_start():
            self._enter_stage2()
        s = self.epoch_ratio
        t = self.schedule.step_for_ratio(s)
        abar = self.schedule.alpha_bar(t)
        omega = cfg_scale(s, p.cfg_max)
        lam = p.lambdas
        batch = self._next_batch()

        shifts = self.model(self.pos_base, self.mask_bool)
        shifts.retain_grad()
        positions = self.pos_base + shifts

        lat_sum = img_sum = src_sum = 0.0
        drag_loss = None
        for cam_idx in batch:
            cam = self.train_cameras[cam_idx]
            rgb, _, _ = splat_render(positions, self.rot, self.log_scales,
                                     self.opacity, self.colors, cam, p.background)
            z = self.codec.encode(rgb)
            # image-space operand is the codec reconstruction of the render,
            # so a converged latent gives an exactly-zero image loss too
            x_rec = self.codec.decode(z)
            eps_np, req_seed = self._noise_for(i, cam_idx)
            request = GuidanceRequest(
                image=rgb.detach().numpy().astype(np.float32),
                init_image=self.cache_x0[cam_idx],
                mask=self.cache_mask[cam_idx],
                points=self.cache_points[cam_idx],
                t=t, alpha_bar=abar, noise=eps_np, cfg=omega, seed=req_seed)
            try:
                resp = self.oracle.respond(request, cam_idx)
                resp.validate_shape(self.latent_shape)
            except GuidanceUnavailableError as exc:
                self.status = PAUSED
                self.pause_reason = f"guidance unavailable: {exc}"
                self.optimizer.zero_grad()
                return
            z_hat = guidance_correction(
                z.detach(), torch.from_numpy(resp.eps_tgt.astype(np.float32)),
                torch.from_numpy(resp.eps_src.astype(np.float32)), abar)
            x_hat = self.codec.decode(z_hat)
            loss_lat, loss_img = drag_sds_losses(z, x_rec, z_hat, x_hat, abar,
                                                 w=self.schedule.weight(t))
            loss_src = source_estimator_residual_loss(self.estimator, z,
                                                      abar, cam_idx)
            cam_loss = (lam.lat * loss_lat + lam.img * loss_img
                        + lam.lora * loss_src) * (lam.dsds / len(batch))
            drag_loss = cam_loss if drag_loss is None else drag_loss + cam_loss
            lat_sum += float(loss_lat.detach())
            img_sum += float(loss_img.detach())
            src_sum += float(loss_src.detach())
            del rgb, z, x_rec, z_hat, x_hat, loss_lat, loss_img, loss_src, cam_loss

        # The regularizer runs on its own model forward: one backward pass
        # covers everything, and shifts.grad stays pure reconstruction
        # pressure for densify (the regularizer pulls on every unmasked shift
        # with constant magnitude and would trip the threshold
        # indiscriminately).
        shifts_reg = self.model(self.pos_base, self.mask_bool)
        loss_rr = region_reg_loss(shifts_reg, self.unmasked_idx_t)
        rr_val = float(loss_rr.detach())
        total_loss = drag_loss + lam.rr * loss_rr \
            if loss_rr.requires_grad else drag_loss
        total_loss.backward()
        if self.stage == 2 and shifts.grad is not None:
            with torch.no_grad():
                self._grad_norm_acc += shifts.grad.norm(dim=1)
                self._grad_norm_count += 1

        n_batch = len(batch)
        total = (lam.dsds * (lam.lat * lat_sum + lam.img * img_sum
                             + lam.lora * src_sum) / n_batch + lam.rr * rr_val)
        row = LossRow(i, s, t, lat_sum / n_batch, img_sum / n_batch,
                      src_sum / n_batch, rr_val, total)
        if not np.isfinite(total):
            self.status = FAILED
            self.diagnostic = {"iteration": i, "row": row.as_tuple(),
                               "reason": "non-finite loss"}
            return
        self.loss_history.append(row)

        self.optimizer.step()
        self.optimizer.zero_grad()
        if self.stage == 2:
            with torch.no_grad():
                self.colors.data.clamp_(0.0, 1.0)
            if self._grad_norm_count >= p.densify.interval:
                self._densify_and_prune()

        self.iteration += 1
        if self.iteration >= self.total_iterations:
            self.status = DONE
        if (self.iteration % p.progress_every == 0
                or self.status == DONE):
            self._publish_snapshot()
            self._emit_event()

    def run(self) -> None:
        """Drive the loop until done, paused, or failed."""
        while self.status == RUNNING:
            self.step_once()

    def _enter_stage2(self) -> None:
        # keep Adam moments for the groups that already train (a reset makes
        # them re-warm with sign-scale steps and churns the converged field);
        # attribute groups join fresh with the soft-edit row scaling
        self.stage = 2
        p = self.params
        rates = configure_learning_rates(p, 2)
        self.optimizer.set_lr("encoder", rates["encoder"])
        scale = soft_row_scale(len(self.scene), self.masked_idx,
                               self.soft_idx, p.soft_mu)
        for name, tensor in (("color", self.colors), ("opacity", self.opacity),
                             ("scale", self.log_scales), ("rotation", self.rot)):
            tensor.requires_grad_(True)
            self.optimizer.add_group(name, [tensor], rates[name],
                                     eps=p.adam_eps_default, row_scale=scale)
        self._grad_norm_acc = torch.zeros(len(self.scene))
        self._grad_norm_count = 0

    # -------------------------------------------------------- densify / prune

    def _densify_and_prune(self) -> DensifyReport:
        p = self.params.densify
        with torch.no_grad():
            report = self._densify_rules(
                self._grad_norm_acc / max(1, self._grad_norm_count), p)
        self._grad_norm_acc = torch.zeros(len(self.scene))
        self._grad_norm_count = 0
        self._densify_events += 1
        self.densify_reports.append(report)
        return report

    def _densify_rules(self, mean_grad: torch.Tensor, p) -> DensifyReport:
        n_before = len(self.scene)
        grad_np = mean_grad.numpy()
        opac = torch.sigmoid(self.opacity.detach())
        keep = opac >= p.opacity_threshold
        over_np = (grad_np > p.grad_threshold) & keep.numpy()
        cap = int(np.floor(p.max_growth * n_before))
        idx_over = np.flatnonzero(over_np)
        if idx_over.size > cap:
            # strongest gradients first, index tie-break, deterministic
            order = np.lexsort((idx_over, -grad_np[idx_over]))
            over_np = np.zeros_like(over_np)
            over_np[idx_over[order[:cap]]] = True
        over = torch.from_numpy(over_np)
        scales = torch.exp(self.log_scales.detach())
        large = scales.max(dim=1).values > p.large_scale_fraction * self.extent
        clone_sel = over & ~large
        split_sel = over & large
        survivors = keep & ~split_sel

        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            [self.params.seed, self.round_index, 733, self._densify_events])))

        new_pos, new_rot, new_ls, new_op, new_col = [], [], [], [], []

        def stage_rows(positions, rotations, log_scales, opacities, colors):
            new_pos.append(positions)
            new_rot.append(rotations)
            new_ls.append(log_scales)
            new_op.append(opacities)
            new_col.append(colors)

        pos = self.pos_base.detach()
        clone_idx = torch.nonzero(clone_sel).squeeze(1)
        if clone_idx.numel():
            jitter = rng.standard_normal((clone_idx.numel(), 3)).astype(np.float32)
            jitter = torch.from_numpy(jitter) * p.clone_jitter * \
                torch.exp(self.log_scales.detach()[clone_idx])
            stage_rows(pos[clone_idx] + jitter,
                       self.rot.detach()[clone_idx],
                       self.log_scales.detach()[clone_idx],
                       self.opacity.detach()[clone_idx],
                       self.colors.detach()[clone_idx])
        split_idx = torch.nonzero(split_sel).squeeze(1)
        if split_idx.numel():
            from .render import quat_to_rotmat_torch
            k = split_idx.numel()
            rots = quat_to_rotmat_torch(self.rot.detach()[split_idx])
            sc = torch.exp(self.log_scales.detach()[split_idx])
            for _ in range(2):
                samp = torch.from_numpy(
                    rng.standard_normal((k, 3)).astype(np.float32))
                offset = (rots @ (samp * sc).unsqueeze(-1)).squeeze(-1)
                stage_rows(pos[split_idx] + offset,
                           self.rot.detach()[split_idx],
                           self.log_scales.detach()[split_idx]
                           - float(np.log(p.split_scale)),
                           self.opacity.detach()[split_idx],
                           self.colors.detach()[split_idx])

        keep_idx = torch.nonzero(survivors).squeeze(1)
        n_new = sum(t.shape[0] for t in new_pos)

        def rebuild(old: torch.Tensor, extra: list[torch.Tensor]) -> torch.Tensor:
            parts = [old.detach()[keep_idx]] + extra
            out = torch.cat(parts) if extra else old.detach()[keep_idx].clone()
            out.requires_grad_(old.requires_grad)
            return out

        self.pos_base = torch.cat([pos[keep_idx]] + new_pos) if new_pos \
            else pos[keep_idx].clone()
        self.rot = rebuild(self.rot, new_rot)
        self.log_scales = rebuild(self.log_scales, new_ls)
        self.opacity = rebuild(self.opacity, new_op)
        self.colors = rebuild(self.colors, new_col)
        for gi, (name, tensor) in enumerate((("color", self.colors),
                                             ("opacity", self.opacity),
                                             ("scale", self.log_scales),
                                             ("rotation", self.rot))):
            self.optimizer.replace_row_param(name, 0, tensor, keep_idx)

        # Sync the numpy scene and apply the mask-closure contract.
        old_mask = self.scene.mask.copy()
        self._sync_scene_from_tensors(mask=np.concatenate(
            [old_mask[keep_idx.numpy()], np.zeros(n_new, dtype=np.uint8)]))
        new_indices = list(range(len(keep_idx), len(self.scene)))
        mark_new_primitives_masked(self.scene, new_indices)
        self.scene.bump_generation()
        self._refresh_partition()
        self.soft_idx = build_soft_group(self.scene, self.params.soft_k) \
            if self.masked_idx.size else np.empty(0, dtype=np.int64)
        self._refresh_row_scales()
        self._grad_norm_acc = torch.zeros(len(self.scene))

        return DensifyReport(
            pruned=int((~keep).sum()),
            cloned=int(clone_idx.numel()),
            split=int(split_idx.numel()),
            new_indices=new_indices,
            n_before=n_before,
            n_after=len(self.scene),
            new_all_masked=bool(self.scene.mask[new_indices].all())
            if new_indices else True)

    def _sync_scene_from_tensors(self, mask: np.ndarray | None = None) -> None:
        sc = self.scene
        sc.positions = self.pos_base.detach().numpy().astype(np.float32).copy()
        sc.rotations = self.rot.detach().numpy().astype(np.float32).copy()
        sc.log_scales = self.log_scales.detach().numpy().astype(np.float32).copy()
        sc.opacity_logits = self.opacity.detach().numpy().astype(np.float32).copy()
        sc.colors = self.colors.detach().numpy().astype(np.float32).copy()
        if mask is not None:
            sc.mask = mask.astype(np.uint8).copy()
        sc.invalidate_aabb()

    # ------------------------------------------------------------- reporting

    def current_shifts(self) -> torch.Tensor:
        with torch.no_grad():
            return self.model(self.pos_base, self.mask_bool)

    def _publish_snapshot(self) -> None:
        with torch.no_grad():
            shifts = self.model(self.pos_base, self.mask_bool)
            snap = {
                "positions": (self.pos_base + shifts).numpy().astype(np.float32),
                "rotations": self.rot.detach().numpy().astype(np.float32),
                "log_scales": self.log_scales.detach().numpy().astype(np.float32),
                "opacity_logits": self.opacity.detach().numpy().astype(np.float32),
                "colors": np.clip(self.colors.detach().numpy(), 0, 1).astype(np.float32),
                "mask": self.scene.mask.copy(),
                "iteration": self.iteration,
            }
        with self.snapshot_lock:
            self.snapshot = snap

    def snapshot_scene(self) -> GaussianScene:
        with self.snapshot_lock:
            snap = self.snapshot
        return make_scene(snap["positions"], snap["rotations"],
                          snap["log_scales"], snap["opacity_logits"],
                          snap["colors"], snap["mask"])

    def _emit_event(self) -> None:
        last = self.loss_history[-1].as_tuple() if self.loss_history else None
        event = {
            "id": len(self.events),
            "iteration": self.iteration,
            "s": self.epoch_ratio,
            "stage": self.stage,
            "status": self.status,
            "t": last[2] if last else None,
            "losses": ({"lat": last[3], "img": last[4], "src": last[5],
                        "rr": last[6], "total": last[7]} if last else None),
            "preview": f"/v1/render?camera=0&width=256&iter={self.iteration}",
        }
        if self.status == DONE:
            event["final"] = {"iterations": self.iteration,
                              "primitives": len(self.scene),
                              "densify_events": self._densify_events}
        self.events.append(event)

    # ------------------------------------------------------------ completion

    def commit(self) -> GaussianScene:
        """Bake shifts into stored positions; returns the round's result scene."""
        if self.status != DONE:
            raise StateError(f"cannot commit run in status {self.status}")
        shifts = self.current_shifts()
        self._sync_scene_from_tensors()
        baked = make_scene(
            (self.pos_base + shifts).numpy().astype(np.float32),
            self.scene.rotations, self.scene.log_scales,
            self.scene.opacity_logits, self.scene.colors, self.scene.mask)
        return baked


def _project_or_none(camera: Camera, p):
    from .cameras import project_point
    from .errors import BehindCameraError
    try:
        u, v, _ = project_point(camera, p)
    except BehindCameraError:
        return None
    return [u, v]


def run_edit(run: EditRun) -> EditRun:
    run.run()
    return run


def start_round(previous_result: GaussianScene, spec: EditSpec,
                cameras: list[Camera], oracle_factory,
                round_index: int) -> EditRun:
    """Chain a new edit round onto a committed result scene.

    The new run gets a freshly captured mirror and a fresh deformation model
    normalized to the baked scene's box.
    """
    return EditRun(previous_result, spec, cameras, oracle_factory,
                   round_index=round_index)
