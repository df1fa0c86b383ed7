"""Adam with named parameter groups, per-row step scaling, and moment surgery.

Per-row scaling implements soft local editing: scaling the gradient would be
cancelled by Adam's normalization, so the multiplier has to act on the step
itself. Moment surgery keeps optimizer state aligned with densify/prune
events that add or remove primitive rows.
"""

from __future__ import annotations

import torch


class AdamGroups:
    def __init__(self, betas=(0.9, 0.999)):
        self.beta1, self.beta2 = betas
        self.groups: dict[str, dict] = {}

    def add_group(self, name: str, params, lr: float, eps: float = 1e-8,
                  row_scale: torch.Tensor | None = None) -> None:
        params = list(params)
        self.groups[name] = {
            "params": params,
            "lr": float(lr),
            "eps": float(eps),
            "row_scale": row_scale,
            "state": [{"m": torch.zeros_like(p), "v": torch.zeros_like(p), "step": 0}
                      for p in params],
        }

    def set_lr(self, name: str, lr: float) -> None:
        self.groups[name]["lr"] = float(lr)

    def set_row_scale(self, name: str, row_scale: torch.Tensor | None) -> None:
        self.groups[name]["row_scale"] = row_scale

    def zero_grad(self) -> None:
        for group in self.groups.values():
            for p in group["params"]:
                p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for group in self.groups.values():
            lr = group["lr"]
            eps = group["eps"]
            scale = group["row_scale"]
            for p, st in zip(group["params"], group["state"]):
                if p.grad is None:
                    continue
                g = p.grad
                st["step"] += 1
                st["m"].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                st["v"].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                bc1 = 1 - self.beta1 ** st["step"]
                bc2 = 1 - self.beta2 ** st["step"]
                update = (st["m"] / bc1) / ((st["v"] / bc2).sqrt() + eps)
                if scale is not None:
                    update = update * scale.reshape(-1, *([1] * (p.dim() - 1)))
                p.add_(update, alpha=-lr)

    @torch.no_grad()
    def replace_row_param(self, name: str, index: int, new_param: torch.Tensor,
                          keep_idx: torch.Tensor) -> None:
        """Swap a (N, ...) parameter after a structural change.

        Moments for surviving rows are carried over via keep_idx; appended
        rows start with zero moments. The step count is kept, matching the
        usual treatment of densified Gaussians.
        """
        group = self.groups[name]
        st = group["state"][index]
        n_new = new_param.shape[0] - keep_idx.shape[0]
        pad = [n_new] + list(new_param.shape[1:])
        st["m"] = torch.cat([st["m"][keep_idx], new_param.new_zeros(pad)])
        st["v"] = torch.cat([st["v"][keep_idx], new_param.new_zeros(pad)])
        group["params"][index] = new_param
