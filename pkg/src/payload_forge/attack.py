"""Embedding-space payload attack against the byte-level detector.

A short random payload is injected into a detected-malicious file and
its embedding rows, and only those rows, are pushed down the loss
gradient toward the benign label until the whole file scores below 0.5.
The perturbed rows are then snapped back to bytes by nearest embedding
row, and an outer reconstruct-and-verify loop repairs cases where that
quantization undoes the evasion. Supported injection sites: overwriting
section slack, a new appended section, or plain end-of-file overlay.

Every reported final score is computed on the reconstructed byte file,
never on the in-memory embedding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import model, pe
from .corpus import ByteFile, derived_seed

log = logging.getLogger("payload_forge.attack")


class AttackError(ValueError):
    pass


class NotDetected(AttackError):
    """The input file already scores benign; there is nothing to evade."""


class SlackTooSmall(AttackError):
    """No slack region can hold a window-aligned payload of the needed size."""


class InvalidSize(AttackError):
    """Requested payload cap is below the minimum aligned payload size."""


@dataclass
class AttackConfig:
    norm: str = "inf"              # "inf" (sign step) or "two" (gradient step)
    epsilon: float | None = None   # None picks the per-norm default
    target_label: int = 0
    max_iters: int = 200
    max_outer_rounds: int = 10
    distance: str = "euclidean"    # reconstruction metric, or "cosine"
    margin: float = 0.0            # extra slack under the 0.5 stop threshold
    normalize_grad: bool = True    # L2-normalize each p=2 step
    seed: int = 0

    def validate(self) -> None:
        if self.norm not in ("inf", "two"):
            raise AttackError(f"unknown norm {self.norm!r}")
        if self.distance not in ("euclidean", "cosine"):
            raise AttackError(f"unknown distance {self.distance!r}")
        if self.step_size() <= 0:
            raise AttackError("epsilon must be positive")
        if self.max_iters < 1 or self.max_outer_rounds < 1:
            raise AttackError("iteration budgets must be at least 1")

    def step_size(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return 0.05 if self.norm == "inf" else 0.5


@dataclass
class AttackResult:
    payload: bytes
    injection: pe.InjectionRecord
    iterations: int
    score_before: float
    score_after: float
    evaded: bool
    trace: list[float]
    attacked: bytes  # the full modified file

    @property
    def k(self) -> int:
        return len(self.payload)


def payload_size(length: int, window: int) -> int:
    """Aligned payload size: k = c + (c - L mod c), so c < k <= 2c and
    L + k is a whole number of windows."""
    if length < 1:
        raise AttackError("file length must be positive")
    if window < 2:
        raise AttackError("window must be at least 2")
    return window + (window - length % window)


def capped_payload_size(length: int, window: int, k_max: int) -> int:
    """Largest k <= k_max that keeps L + k window-aligned."""
    k = k_max - (length + k_max) % window
    if k <= window:
        raise InvalidSize(
            f"cap {k_max} is below the minimum payload size "
            f"{payload_size(length, window)} for this file")
    return k


def init_payload(k: int, seed: int) -> bytes:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, 256, size=k, dtype=np.uint8).tobytes()


def perturb_step(z_payload: np.ndarray, grad: np.ndarray,
                 cfg: AttackConfig) -> np.ndarray:
    """One descent step on the payload rows under the configured norm."""
    if z_payload.shape != grad.shape:
        raise AttackError("payload and gradient shapes differ")
    eps = cfg.step_size()
    if cfg.norm == "inf":
        return z_payload - eps * np.sign(grad)
    if cfg.normalize_grad:
        return z_payload - eps * grad / max(float(np.linalg.norm(grad)), 1e-12)
    return z_payload - eps * grad


def reconstruct(params: model.ModelParams, rows: np.ndarray,
                cfg: AttackConfig) -> bytes:
    """Snap each embedding row to its nearest byte, ties to the lowest index."""
    emb = params.embedding
    out = np.empty(rows.shape[0], dtype=np.uint8)
    for lo in range(0, rows.shape[0], 1024):
        chunk = rows[lo:lo + 1024]
        if cfg.distance == "euclidean":
            diff = chunk[:, None, :] - emb[None, :, :]
            dist = (diff * diff).sum(axis=2)
        else:
            norms = np.linalg.norm(chunk, axis=1)[:, None] * np.linalg.norm(emb, axis=1)[None, :]
            dist = 1.0 - (chunk @ emb.T) / np.maximum(norms, 1e-12)
        out[lo:lo + 1024] = dist.argmin(axis=1)
    return out.tobytes()


@dataclass
class _InjectionPlan:
    initial: bytes          # modified file carrying the initial payload
    offset: int             # payload byte offset inside the modified file
    rebuild: object         # payload bytes -> (file bytes, InjectionRecord)


def _plan_injection(file: ByteFile, payload0: bytes, mode: str,
                    window: int) -> _InjectionPlan:
    data = file.data
    k = len(payload0)
    if mode == "overlay":
        def rebuild(p: bytes):
            return pe.append_overlay(data, p)
        modified, _ = rebuild(payload0)
        return _InjectionPlan(modified, len(data), rebuild)

    layout = pe.parse(data)
    if mode == "section":
        def rebuild(p: bytes):
            new_layout, rec = pe.append_section(layout, p)
            return new_layout.to_bytes(), rec
        modified, rec = rebuild(payload0)
        return _InjectionPlan(modified, rec.file_offset, rebuild)

    if mode == "slack":
        for region in pe.find_slack(layout):
            aligned = -(-region.file_offset // window) * window
            end = region.file_offset + region.length
            if aligned + k <= end:
                trimmed = pe.SlackRegion(region.section_index, aligned, end - aligned)

                def rebuild(p: bytes, trimmed=trimmed):
                    new_layout, rec = pe.inject_slack(layout, p, trimmed)
                    return new_layout.to_bytes(), rec
                modified, _ = rebuild(payload0)
                return _InjectionPlan(modified, aligned, rebuild)
        raise SlackTooSmall(
            f"no slack region holds {k} window-aligned payload bytes")

    raise AttackError(f"unknown injection mode {mode!r}")


def _router_fixed_max(params: model.ModelParams, rows: np.ndarray,
                      w_lo: int, w_hi: int) -> np.ndarray:
    """Per-filter max of the gated activations over all windows the payload
    cannot touch."""
    _, _, _, _, gated = model.window_activations(params, rows)
    keep = np.ones(gated.shape[0], dtype=bool)
    keep[w_lo:w_hi + 1] = False
    if not keep.any():
        raise AttackError("file too small: payload would cover every window")
    return gated[keep].max(axis=0)


def _optimize(params: model.ModelParams, plan: _InjectionPlan, k: int,
              cfg: AttackConfig) -> tuple[bytes, bytes, int, list[float]]:
    """Iterate payload-row perturbations with reconstruct-and-verify rounds.

    The descent runs on continuous embedding rows, but what must evade is
    the quantized byte payload, so every iteration also scores the
    nearest-byte snapshot of the current rows and keeps the best one
    seen. Each outer round re-embeds its reconstruction before resuming,
    which keeps the search near byte-realizable activations instead of
    drifting off the embedding manifold.

    Returns (final file bytes, payload bytes, iterations used, score trace).
    """
    mcfg = params.cfg
    c, d, F = mcfg.window, mcfg.embed_dim, mcfg.filters
    A, ba = params.conv_a_w, params.conv_a_b
    B, bb = params.conv_b_w, params.conv_b_b

    buf = bytearray(plan.initial)
    p0 = plan.offset
    x = np.frombuffer(bytes(buf), dtype=np.uint8)
    xp = model.pad_to_window(x, mcfg)
    z = params.embedding[xp].copy()

    w_lo, w_hi = p0 // c, (p0 + k - 1) // c
    span = slice(w_lo * c, (w_hi + 1) * c)
    free = slice(p0 - w_lo * c, p0 - w_lo * c + k)
    fixed_max = _router_fixed_max(params, z, w_lo, w_hi)
    filt = np.arange(F)

    def span_score(span_rows: np.ndarray):
        windows = span_rows.reshape(-1, c * d)
        pre_a = windows @ A.T + ba
        pre_b = windows @ B.T + bb
        gate = model.sigmoid(pre_b)
        gated = pre_a * gate
        span_max = gated.max(axis=0)
        span_arg = gated.argmax(axis=0)
        routed = span_max > fixed_max  # payload owns these filters' maxima
        pooled = np.where(routed, span_max, fixed_max)
        hidden_pre = params.fc_w @ pooled + params.fc_b
        hidden = np.maximum(hidden_pre, 0.0)
        logit = float(params.out_w @ hidden + params.out_b[0])
        score = float(model.sigmoid(logit))
        return score, logit, (pre_a, gate, gated, span_arg, routed, hidden_pre)

    start_logit = float(np.log((0.5 - cfg.margin) / (0.5 + cfg.margin))) if cfg.margin else 0.0
    tau_logit = start_logit
    iters = 0
    trace: list[float] = []
    best_payload = bytes(buf[p0:p0 + k])
    best_quant = float("inf")
    for round_no in range(cfg.max_outer_rounds):
        stalled = False
        reached = False
        for _ in range(cfg.max_iters):
            score, logit, ctx = span_score(z[span])
            trace.append(score)

            # track the byte-realizable shadow of the current rows as a
            # fallback candidate for budget exhaustion
            quant = reconstruct(params, z[span][free], cfg)
            q_rows = z[span].copy()
            q_rows[free] = params.embedding[np.frombuffer(quant, dtype=np.uint8)]
            q_score, _, _ = span_score(q_rows)
            if q_score < best_quant:
                best_quant, best_payload = q_score, quant
            if logit <= tau_logit:
                reached = True
                break

            # gradient of BCE toward the target label, payload rows only
            pre_a, gate, gated, span_arg, routed, hidden_pre = ctx
            dlogit = score - cfg.target_label
            dhidden_pre = dlogit * params.out_w * (hidden_pre > 0)
            dpooled = params.fc_w.T @ dhidden_pre
            dgated = np.zeros_like(gated)
            dgated[span_arg[routed], filt[routed]] = dpooled[routed]
            dpre_a = dgated * gate
            dpre_b = dgated * pre_a * gate * (1.0 - gate)
            dwin = dpre_a @ A + dpre_b @ B
            grad = dwin.reshape(-1, d)[free]
            if not grad.any():
                stalled = True
                break
            z[span][free] = perturb_step(z[span][free], grad, cfg)
            iters += 1

        # reconstruct and verify on the actual byte file
        payload = reconstruct(params, z[span][free], cfg)
        buf[p0:p0 + k] = payload
        if model.predict_file(params, bytes(buf)) < 0.5:
            return bytes(buf), payload, iters, trace

        if stalled:
            # no gradient reaches the payload: fresh random payload, new
            # chance for some filter's maximum to land in the span
            log.debug("round %d stalled, resampling payload", round_no)
            restart = init_payload(k, derived_seed(cfg.seed, "restart", round_no))
            buf[p0:p0 + k] = restart
            z[span][free] = params.embedding[np.frombuffer(restart, dtype=np.uint8)]
            tau_logit = start_logit
        elif reached:
            # quantization undid the evasion: keep descending the same
            # trajectory with a deeper target so the byte shadow catches up
            tau_logit -= 2.0

    buf[p0:p0 + k] = best_payload
    return bytes(buf), best_payload, iters, trace


def _run(params: model.ModelParams, file: ByteFile, cfg: AttackConfig,
         mode: str, k: int, score_before: float) -> AttackResult:
    payload0 = init_payload(k, derived_seed(cfg.seed, "init"))
    plan = _plan_injection(file, payload0, mode, params.cfg.window)
    final, payload, iters, trace = _optimize(params, plan, k, cfg)
    rebuilt, record = plan.rebuild(payload)
    if rebuilt != final:
        raise AttackError("rebuilt file does not match the optimized buffer")
    score_after = model.predict_file(params, final)
    return AttackResult(
        payload=payload,
        injection=record,
        iterations=iters,
        score_before=score_before,
        score_after=score_after,
        evaded=score_after < 0.5,
        trace=trace,
        attacked=final,
    )


def generate(params: model.ModelParams, file: ByteFile, cfg: AttackConfig,
             mode: str = "overlay") -> AttackResult:
    """Full attack on one detected-malicious file.

    Raises NotDetected when the input already scores benign, and
    SlackTooSmall in slack mode when no region fits. A spent budget is
    not an error; the result simply reports evaded=False.
    """
    cfg.validate()
    score_before = model.predict_file(params, file)
    if not model.is_malicious(score_before):
        raise NotDetected(f"input scores {score_before:.4f}, already benign")
    k = payload_size(len(file.data), params.cfg.window)
    return _run(params, file, cfg, mode, k, score_before)


def attack_with_size(params: model.ModelParams, file: ByteFile,
                     cfg: AttackConfig, k_max: int,
                     mode: str = "overlay") -> AttackResult:
    """Attack with the largest aligned payload not exceeding k_max."""
    cfg.validate()
    score_before = model.predict_file(params, file)
    if not model.is_malicious(score_before):
        raise NotDetected(f"input scores {score_before:.4f}, already benign")
    k = capped_payload_size(len(file.data), params.cfg.window, k_max)
    return _run(params, file, cfg, mode, k, score_before)
