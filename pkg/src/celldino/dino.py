"""Self-distillation pretraining: multi-crop views, the student/teacher
cross-entropy objective over view pairs, EMA teacher updates on a cosine
schedule, and teacher-output centering against collapse.

The teacher sees only the two global views; the student sees every view.
Teacher outputs never carry gradients, and its weights move only through
the EMA update.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tt
from .binio import read_f32_array, read_json_block, read_magic, write_f32_array, write_json_block, write_magic
from .data import DatasetManifest, load_image
from .optim import AdamWState, adamw_step, cosine_schedule
from .tensor import Tensor
from .vit import ViTConfig, ViTParams, init_vit, read_vit_block, vit_forward, write_vit_block

DINO_MAGIC = b"DINO"
DINO_VERSION = 1


@dataclass(frozen=True)
class DinoConfig:
    out_dim: int = 256  # projection output dimension (K)
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    center_momentum: float = 0.9
    center_enabled: bool = True
    n_local_views: int = 6
    global_crop_px: int = 96
    global_scale: tuple[float, float] = (0.4, 1.0)
    local_crop_px: int = 48
    local_scale: tuple[float, float] = (0.05, 0.4)
    flip_probability: float = 0.5
    protein_rescale_probability: float = 0.2
    protein_rescale_range: tuple[float, float] = (0.5, 1.5)
    warp_enabled: bool = False  # "cell warping" stand-in; experimental
    warp_sigma: float = 2.0
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    lr_end: float = 1e-5
    lr_warmup_steps: int = 0
    tau_teacher_warmup: float | None = None  # starting (softer) teacher temp
    tau_warmup_steps: int = 0
    weight_decay: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    head_hidden: int = 256
    head_bottleneck: int = 64
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.tau_student > self.tau_teacher > 0:
            raise ValueError(
                f"need tau_student > tau_teacher > 0, got {self.tau_student}, {self.tau_teacher}"
            )
        if not 0.0 <= self.lambda_start <= self.lambda_end <= 1.0:
            raise ValueError(
                f"need 0 <= lambda_start <= lambda_end <= 1, got "
                f"{self.lambda_start}, {self.lambda_end}"
            )
        for lo, hi in (self.global_scale, self.local_scale):
            if not 0.0 < lo <= hi <= 1.0:
                raise ValueError(f"scale range ({lo}, {hi}) outside (0, 1]")
        if self.local_crop_px >= self.global_crop_px:
            raise ValueError("local views must be smaller than global views")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError(f"center momentum {self.center_momentum} outside [0, 1)")
        if self.tau_teacher_warmup is not None and self.tau_teacher_warmup < self.tau_teacher:
            raise ValueError("teacher temperature warmup must start at or above the final value")


@dataclass
class ViewSet:
    """Two global views plus the local views of one image, all (C, h, w)."""

    globals: list[np.ndarray]
    locals: list[np.ndarray]

    def __post_init__(self):
        if len(self.globals) != 2:
            raise ValueError(f"a view set has exactly 2 global views, got {len(self.globals)}")
        gh = self.globals[0].shape[-1]
        for v in self.locals:
            if v.shape[-1] >= gh:
                raise ValueError("local views must be spatially smaller than global views")

    @property
    def n_views(self) -> int:
        return 2 + len(self.locals)


@dataclass
class DinoState:
    config: DinoConfig
    student: ViTParams
    student_head: dict[str, Tensor]
    teacher: ViTParams
    teacher_head: dict[str, Tensor]
    center: np.ndarray  # (K,)
    opt: AdamWState
    epoch: int = 0
    step: int = 0
    total_steps: int = 0
    split_seed: int = 0
    holdout_ids: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# image sampling helpers


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) with bilinear sampling, half-pixel aligned."""
    c, h, w = img.shape
    if h == out_h and w == out_w:
        return img.astype(np.float32, copy=True)
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    img = img.astype(np.float32, copy=False)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(
    img: np.ndarray,
    out_px: int,
    scale: tuple[float, float],
    rng: np.random.Generator,
    ratio: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
) -> np.ndarray:
    """Crop a random area/aspect window and resize to out_px x out_px."""
    _, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = rng.uniform(scale[0], scale[1]) * area
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            crop = img[:, top : top + ch, left : left + cw]
            break
    else:
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        crop = img[:, top : top + side, left : left + side]
    if crop.shape[1] == 0 or crop.shape[2] == 0:
        raise ValueError("degenerate crop with zero area")
    return bilinear_resize(crop, out_px, out_px)


def elastic_warp(img: np.ndarray, sigma: float, rng: np.random.Generator, grid: int = 4) -> np.ndarray:
    """Smooth random displacement field from a coarse control grid."""
    c, h, w = img.shape
    coarse = rng.normal(0.0, sigma, size=(2, grid, grid)).astype(np.float32)
    dy = bilinear_resize(coarse[:1], h, w)[0]
    dx = bilinear_resize(coarse[1:], h, w)[0]
    yy, xx = np.mgrid[0:h, 0:w]
    ys = np.clip(yy + dy, 0, h - 1)
    xs = np.clip(xx + dx, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    out = np.empty_like(img, dtype=np.float32)
    for ch in range(c):
        plane = img[ch]
        top = plane[y0, x0] * (1 - wx) + plane[y0, x1] * wx
        bot = plane[y1, x0] * (1 - wx) + plane[y1, x1] * wx
        out[ch] = top * (1 - wy) + bot * wy
    return out


def _augment_view(
    img: np.ndarray,
    out_px: int,
    scale: tuple[float, float],
    config: DinoConfig,
    rng: np.random.Generator,
    protein_channel: int,
) -> np.ndarray:
    view = random_resized_crop(img, out_px, scale, rng)
    if rng.random() < config.flip_probability:
        view = view[:, :, ::-1]
    if rng.random() < config.flip_probability:
        view = view[:, ::-1, :]
    if config.warp_enabled:
        view = elastic_warp(np.ascontiguousarray(view), config.warp_sigma, rng)
    if rng.random() < config.protein_rescale_probability:
        factor = rng.uniform(*config.protein_rescale_range)
        view = view.copy()
        view[protein_channel] *= factor
    return np.ascontiguousarray(view, dtype=np.float32)


def make_views(
    image: np.ndarray,
    config: DinoConfig,
    rng: np.random.Generator,
    protein_channel: int = 0,
) -> ViewSet:
    """2 global + n_local_views augmented crops; deterministic given rng."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {image.shape}")
    globals_ = [
        _augment_view(image, config.global_crop_px, config.global_scale, config, rng, protein_channel)
        for _ in range(2)
    ]
    locals_ = [
        _augment_view(image, config.local_crop_px, config.local_scale, config, rng, protein_channel)
        for _ in range(config.n_local_views)
    ]
    return ViewSet(globals=globals_, locals=locals_)


# ---------------------------------------------------------------------------
# projection head


def head_param_order(embed_dim: int, config: DinoConfig) -> list[tuple[str, tuple[int, ...]]]:
    h, b, k = config.head_hidden, config.head_bottleneck, config.out_dim
    return [
        ("w1", (embed_dim, h)),
        ("b1", (h,)),
        ("w2", (h, h)),
        ("b2", (h,)),
        ("w3", (h, b)),
        ("b3", (b,)),
        ("wk", (b, k)),
    ]


def init_head(embed_dim: int, config: DinoConfig, seed: int) -> dict[str, Tensor]:
    from .vit import trunc_normal

    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in head_param_order(embed_dim, config):
        if name.startswith("b"):
            data = np.zeros(shape, dtype=np.float32)
        else:
            data = trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def head_forward(head: dict[str, Tensor], x: Tensor) -> Tensor:
    """3-layer GELU MLP, L2-normalized bottleneck, then a weight-normalized
    linear map to the projection space.

    Unit-norm output columns pin the logit scale, so the teacher
    temperature keeps sharpening throughout training regardless of weight
    decay; without this the outputs drift to the trivial uniform optimum.
    """
    x = tt.gelu(tt.add(tt.matmul(x, head["w1"]), head["b1"]))
    x = tt.gelu(tt.add(tt.matmul(x, head["w2"]), head["b2"]))
    x = tt.add(tt.matmul(x, head["w3"]), head["b3"])
    x = tt.l2_normalize(x)
    wk_unit = tt.transpose(tt.l2_normalize(tt.transpose(head["wk"], (1, 0))), (1, 0))
    return tt.matmul(x, wk_unit)


# ---------------------------------------------------------------------------
# loss and updates


def teacher_temperature(config: DinoConfig, step: int) -> float:
    """Linear warmup from a softer temperature down to the final one."""
    if config.tau_teacher_warmup is None or config.tau_warmup_steps <= 0 or step >= config.tau_warmup_steps:
        return config.tau_teacher
    frac = step / config.tau_warmup_steps
    return config.tau_teacher_warmup + frac * (config.tau_teacher - config.tau_teacher_warmup)


def _teacher_probs(state: DinoState, globals_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered, sharpened teacher distributions for the global views."""
    cfg = state.config
    with tt.no_grad():
        feats = vit_forward(state.teacher, Tensor(globals_batch))
        logits = head_forward(state.teacher_head, feats).data
        centered = logits - state.center if cfg.center_enabled else logits
        probs = tt.tempered_softmax(Tensor(centered), tau=teacher_temperature(cfg, state.step)).data
    return probs, logits


def dino_loss(state: DinoState, views: ViewSet | list[ViewSet]) -> Tensor:
    """Mean cross-entropy over all (teacher global, student view) pairs
    with the same-view pairs excluded: 2 * (n_views - 1) terms."""
    batch = [views] if isinstance(views, ViewSet) else list(views)
    if not batch:
        raise ValueError("empty view set")
    loss, _ = dino_loss_and_stats(state, batch)
    return loss


def dino_loss_and_stats(state: DinoState, batch: list[ViewSet]) -> tuple[Tensor, dict]:
    cfg = state.config
    n = len(batch)
    if n == 0:
        raise ValueError("empty view set")
    n_local = len(batch[0].locals)
    n_views = 2 + n_local

    globals_stack = np.stack([vs.globals[g] for g in range(2) for vs in batch])
    teacher_probs, teacher_logits = _teacher_probs(state, globals_stack)

    student_feats_g = vit_forward(state.student, Tensor(globals_stack))
    student_probs_g = tt.tempered_softmax(
        head_forward(state.student_head, student_feats_g), tau=cfg.tau_student
    )
    student_probs_l = None
    if n_local:
        locals_stack = np.stack([vs.locals[v] for v in range(n_local) for vs in batch])
        student_feats_l = vit_forward(state.student, Tensor(locals_stack))
        student_probs_l = tt.tempered_softmax(
            head_forward(state.student_head, student_feats_l), tau=cfg.tau_student
        )

    terms = []
    for g in range(2):
        p_t = Tensor(teacher_probs[g * n : (g + 1) * n])
        for v in range(2):
            if v == g:
                continue
            p_s = student_probs_g[v * n : (v + 1) * n]
            terms.append(tt.cross_entropy_rows(p_t, p_s))
        for v in range(n_local):
            p_s = student_probs_l[v * n : (v + 1) * n]
            terms.append(tt.cross_entropy_rows(p_t, p_s))
    assert len(terms) == 2 * (n_views - 1)

    total = terms[0]
    for term in terms[1:]:
        total = tt.add(total, term)
    loss = tt.mul(total, 1.0 / len(terms))

    entropy = float(
        -(teacher_probs * np.log(teacher_probs + 1e-12)).sum(axis=-1).mean(dtype=np.float64)
    )
    stats = {
        "teacher_entropy": entropy,
        "teacher_logits": teacher_logits,
        "n_pairs": len(terms),
    }
    return loss, stats


def ema_update(
    student: ViTParams,
    student_head: dict[str, Tensor],
    teacher: ViTParams,
    teacher_head: dict[str, Tensor],
    lam: float,
) -> tuple[ViTParams, dict[str, Tensor]]:
    """teacher <- lam * teacher + (1 - lam) * student, elementwise."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")

    def blend(t: Tensor, s: Tensor, name: str) -> Tensor:
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        if lam == 1.0:
            return Tensor(t.data.copy())
        if lam == 0.0:
            return Tensor(s.data.copy())
        # t + (1-lam)(s - t): keeps teacher == student an exact fixed point
        return Tensor(t.data + np.float32(1.0 - lam) * (s.data - t.data))

    new_backbone = {
        name: blend(teacher.tensors[name], student.tensors[name], name)
        for name in teacher.tensors
    }
    new_head = {name: blend(teacher_head[name], student_head[name], name) for name in teacher_head}
    return ViTParams(config=teacher.config, tensors=new_backbone), new_head


def center_update(center: np.ndarray, teacher_logits: np.ndarray, momentum: float) -> np.ndarray:
    """center <- momentum * center + (1 - momentum) * batch mean of logits."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum {momentum} outside [0, 1)")
    if teacher_logits.shape[-1] != center.shape[0]:
        raise ValueError(
            f"output dim {teacher_logits.shape[-1]} != center dim {center.shape[0]}"
        )
    batch_mean = teacher_logits.mean(axis=0, dtype=np.float64).astype(np.float32)
    return momentum * center + (1.0 - momentum) * batch_mean


# ---------------------------------------------------------------------------
# training loop


def holdout_split(ids: list[str], test_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic (train_ids, test_ids) split; the test side is untouched
    by pretraining and by every cross-validation fold."""
    if not ids:
        raise ValueError("empty dataset")
    n_test = int(round(len(ids) * test_fraction))
    if len(ids) - n_test < 1:
        raise ValueError(f"dataset too small to split: {len(ids)} images")
    order = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


def init_dino_state(
    vit_config: ViTConfig, config: DinoConfig, split_seed: int, holdout_ids: list[str], total_steps: int
) -> DinoState:
    student = init_vit(vit_config)
    student_head = init_head(vit_config.embed_dim, config, seed=config.seed + 1)
    teacher = ViTParams(
        config=vit_config,
        tensors={n: Tensor(t.data.copy()) for n, t in student.tensors.items()},
    )
    teacher_head = {n: Tensor(t.data.copy()) for n, t in student_head.items()}
    opt = AdamWState(
        lr=config.lr,
        weight_decay=config.weight_decay,
        beta1=config.beta1,
        beta2=config.beta2,
    )
    return DinoState(
        config=config,
        student=student,
        student_head=student_head,
        teacher=teacher,
        teacher_head=teacher_head,
        center=np.zeros(config.out_dim, dtype=np.float32),
        opt=opt,
        split_seed=split_seed,
        holdout_ids=list(holdout_ids),
        total_steps=total_steps,
    )


def _flatten(state: DinoState) -> dict[str, Tensor]:
    flat = {f"backbone.{n}": t for n, t in state.student.tensors.items()}
    flat.update({f"head.{n}": t for n, t in state.student_head.items()})
    return flat


def _unflatten(state: DinoState, flat: dict[str, Tensor]):
    state.student = ViTParams(
        config=state.student.config,
        tensors={n: flat[f"backbone.{n}"] for n in state.student.tensors},
    )
    state.student_head = {n: flat[f"head.{n}"] for n in state.student_head}


def pretrain(
    manifest: DatasetManifest,
    vit_config: ViTConfig,
    config: DinoConfig,
    split_seed: int,
    resume: DinoState | None = None,
    protein_channel: int | None = None,
    on_epoch=None,
) -> tuple[DinoState, list[dict]]:
    """Full self-distillation loop over the 90% training split.

    Per step: views -> student/teacher forward -> pair loss -> backward on
    the student only -> AdamW -> EMA teacher update (cosine lambda) ->
    center update. Returns the final state and one log record per epoch.
    """
    ids = [r.image_id for r in manifest.records]
    train_ids, test_ids = holdout_split(ids, config.test_fraction, split_seed)
    if protein_channel is None:
        protein_channel = (
            manifest.channels.index("protein") if "protein" in manifest.channels else 0
        )

    by_id = {r.image_id: r for r in manifest.records}
    train_images = [load_image(manifest, by_id[i]).data for i in train_ids]

    steps_per_epoch = max(1, math.ceil(len(train_images) / config.batch_size))
    total_steps = config.epochs * steps_per_epoch

    if resume is not None:
        state = resume
        if state.holdout_ids != test_ids:
            raise ValueError("resume checkpoint holdout does not match this dataset/split")
        if state.epoch > config.epochs:
            raise ValueError(
                f"resume checkpoint is at epoch {state.epoch}, config targets {config.epochs}"
            )
        if state.step != state.epoch * steps_per_epoch:
            raise ValueError("resume checkpoint step counter inconsistent with this dataset")
        # the lambda/lr schedules continue from the stored step over the
        # current horizon (a longer horizon extends the cosine)
        state.total_steps = total_steps
    else:
        state = init_dino_state(vit_config, config, split_seed, test_ids, total_steps)

    logs: list[dict] = []
    for epoch in range(state.epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_images))
        epoch_losses: list[float] = []
        epoch_entropies: list[float] = []
        lam = lr = None
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [
                make_views(train_images[i], config, rng, protein_channel) for i in idx
            ]
            try:
                loss, stats = dino_loss_and_stats(state, batch)
                grads = tt.backward(loss)
            except tt.NonFiniteError as exc:
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {state.step}: {exc}"
                ) from exc
            lr = cosine_schedule(state.step, total_steps, config.lr, config.lr_end)
            if config.lr_warmup_steps > 0 and state.step < config.lr_warmup_steps:
                lr *= (state.step + 1) / config.lr_warmup_steps
            flat, state.opt = adamw_step(_flatten(state), grads, state.opt, lr=lr)
            _unflatten(state, flat)

            lam = cosine_schedule(state.step, total_steps, config.lambda_start, config.lambda_end)
            state.teacher, state.teacher_head = ema_update(
                state.student, state.student_head, state.teacher, state.teacher_head, lam
            )
            if config.center_enabled:
                state.center = center_update(
                    state.center, stats["teacher_logits"], config.center_momentum
                )
            state.step += 1
            epoch_losses.append(loss.item())
            epoch_entropies.append(stats["teacher_entropy"])
        state.epoch = epoch + 1
        record = {
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)),
            "teacher_entropy": float(np.mean(epoch_entropies)),
            "lambda": lam,
            "lr": lr,
        }
        logs.append(record)
        if on_epoch is not None:
            on_epoch(record, state)
    return state, logs


# ---------------------------------------------------------------------------
# checkpoint io


def save_dino(path, state: DinoState):
    with open(path, "wb") as f:
        write_magic(f, DINO_MAGIC, DINO_VERSION)
        meta = {
            "config": _config_to_json(state.config),
            "epoch": state.epoch,
            "step": state.step,
            "total_steps": state.total_steps,
            "split_seed": state.split_seed,
            "holdout_ids": state.holdout_ids,
        }
        write_json_block(f, meta)
        write_vit_block(f, state.student)
        for name, _ in head_param_order(state.student.config.embed_dim, state.config):
            write_f32_array(f, state.student_head[name].data)
        write_vit_block(f, state.teacher)
        for name, _ in head_param_order(state.teacher.config.embed_dim, state.config):
            write_f32_array(f, state.teacher_head[name].data)
        write_f32_array(f, state.center)


def load_dino(path) -> DinoState:
    with open(path, "rb") as f:
        read_magic(f, DINO_MAGIC, DINO_VERSION)
        meta = read_json_block(f)
        config = _config_from_json(meta["config"])
        student = read_vit_block(f)
        student_head = {
            name: Tensor(read_f32_array(f, shape), requires_grad=True)
            for name, shape in head_param_order(student.config.embed_dim, config)
        }
        teacher = read_vit_block(f)
        teacher_head = {
            name: Tensor(read_f32_array(f, shape))
            for name, shape in head_param_order(teacher.config.embed_dim, config)
        }
        center = read_f32_array(f, (config.out_dim,))
    return DinoState(
        config=config,
        student=student,
        student_head=student_head,
        teacher=teacher,
        teacher_head=teacher_head,
        center=center,
        opt=AdamWState(
            lr=config.lr,
            weight_decay=config.weight_decay,
            beta1=config.beta1,
            beta2=config.beta2,
        ),
        epoch=meta["epoch"],
        step=meta["step"],
        total_steps=meta["total_steps"],
        split_seed=meta["split_seed"],
        holdout_ids=list(meta["holdout_ids"]),
    )


def _config_to_json(config: DinoConfig) -> dict:
    obj = asdict(config)
    for key in ("global_scale", "local_scale", "protein_rescale_range"):
        obj[key] = list(obj[key])
    return obj


def _config_from_json(obj: dict) -> DinoConfig:
    obj = dict(obj)
    for key in ("global_scale", "local_scale", "protein_rescale_range"):
        obj[key] = tuple(obj[key])
    return DinoConfig(**obj)


def scheduled_lambda(state: DinoState) -> float:
    return cosine_schedule(
        min(state.step, state.total_steps),
        state.total_steps,
        state.config.lambda_start,
        state.config.lambda_end,
    )
