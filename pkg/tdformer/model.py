"""
Desk-scale TDFormer: spiking patch embedding, transformer blocks with the
Control Module in the first block, the Processing Module feedback path, a
mean-pooled classification head, the multi-stage loss and the training loop.
"""
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from typing import Optional

import numpy as np

from .attention import ATTENTION_KINDS, SCALED_KINDS, AttentionConfig, attend
from .errors import ConfigurationError, TrainingDivergedError
from .layers import (BatchNorm, Linear, SpikingProjection, fire_sequence, membrane_shortcut, observe,
                     record_activity)
from .neuron import LifConfig
from .tensor import (Node, SpikeTensor, add, cross_entropy, get_dtype, get_precision,
                     no_grad, reduce_mean, scale)
from .topdown import (CM_VARIANTS, PM_VARIANTS, ControlModule, ProcessingModule,
                      SubnetSchedule, control_module, run_subnet_chain)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tdformer-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    T: int = 4
    n_sub: int = 2
    alphas: Optional[tuple] = None
    image_size: int = 8
    in_channels: int = 1
    patch_size: int = 1
    embed_channels: int = 32
    depth: int = 2
    conv_blocks: int = 1
    num_classes: int = 2
    attention: str = "ssa"
    heads: int = 2
    scale: float = 0.125
    mlp_ratio: int = 2
    cm: str = "CM1"
    pm: str = "v1"
    clamp_a: float = 1.5
    clamp_b: float = 0.0
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    attn_v_th: float = 0.5
    pm_v_th: float = 0.5
    feedback: bool = True
    persist_membrane: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alphas is not None:
            object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        for name in ("T", "image_size", "in_channels", "patch_size", "embed_channels", "depth",
                     "conv_blocks", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError("must be >= 1", field=name)
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes", field="num_classes")
        if self.image_size % self.patch_size:
            raise ConfigurationError("patch_size must divide image_size", field="patch_size")
        if self.attention not in ATTENTION_KINDS or self.attention == "pm_spatial":
            raise ConfigurationError("unknown block attention '{}'".format(self.attention), field="attention")
        if self.cm not in CM_VARIANTS:
            raise ConfigurationError("expected one of {}".format(sorted(CM_VARIANTS)), field="cm")
        if self.pm not in PM_VARIANTS:
            raise ConfigurationError("expected one of {}".format(PM_VARIANTS), field="pm")
        if not 1.0 <= self.clamp_a <= 2.0:
            raise ConfigurationError("a must lie in [1, 2], got {}".format(self.clamp_a), field="clamp_a")
        if not 0.0 <= self.clamp_b < self.clamp_a:
            raise ConfigurationError("b must satisfy 0 <= b < a, got {}".format(self.clamp_b), field="clamp_b")
        self.lif()
        self.lif(self.pm_v_th)
        self.attention_config().check_channels(self.embed_channels)
        if self.cm == "CM2" and not self.attention_config().uses_value:
            raise ConfigurationError("CM2 fuses into V, which {} does not use".format(self.attention), field="cm")
        self.schedule()

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigurationError("unknown model setting", field=unknown[0])
        return cls(**values)

    @property
    def tokens(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size ** 2

    @property
    def hidden_channels(self):
        return self.embed_channels * self.mlp_ratio

    def lif(self, v_th=None):
        return LifConfig(tau=self.tau, v_th=self.v_th if v_th is None else v_th, v_reset=self.v_reset)

    def attention_config(self):
        return AttentionConfig(kind=self.attention,
                               scale=self.scale if self.attention in SCALED_KINDS else None,
                               heads=self.heads,
                               lif=self.lif(self.attn_v_th))

    def schedule(self):
        return SubnetSchedule.uniform(self.T, self.n_sub, self.alphas)


def patchify(images, patch_size):
    """[B, T, C, H, W] images to time-major patch tokens [T, B, N, C p p]."""
    b, t, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, t, c, h // p, p, w // p, p).transpose(1, 0, 3, 5, 2, 4, 6)
    return x.reshape(t, b, (h // p) * (w // p), c * p * p)


class TransformerBlock:
    """Attention and MLP, each closed by a membrane shortcut added before the LIF."""

    def __init__(self, rng, cfg, index, variant=None):
        channels = cfg.embed_channels
        self.prefix = "block{}.".format(index)
        self.lif = cfg.lif()
        self.attn_cfg = cfg.attention_config()
        self.cm = ControlModule(rng, channels, self.lif, variant, self.attn_cfg.uses_value, self.prefix)
        # normalises Q K^T V, which otherwise stays far below the attention threshold
        self.attn_bn = None
        if self.attn_cfg.kind in SCALED_KINDS:
            self.attn_bn = BatchNorm(channels, gain=self.attn_cfg.firing_lif.firing_current)
        self.proj = Linear(rng, channels, channels, bias=False)
        self.proj_bn = BatchNorm(channels, gain=self.lif.firing_current)
        self.fc1 = SpikingProjection(rng, channels, cfg.hidden_channels, self.lif, self.prefix + "fc1")
        self.fc2 = Linear(rng, cfg.hidden_channels, channels, bias=False)
        self.fc2_bn = BatchNorm(channels, gain=self.lif.firing_current)

    def __call__(self, x, s_td, training, bank=None):
        p = self.prefix
        q, k, v = control_module(x, s_td, self.cm.variant, self.cm, training, bank)
        norm = None
        if self.attn_bn is not None:
            norm = partial(self.attn_bn, training=training)
        a = attend(q, k, v, self.attn_cfg, bank, p + "attn", norm)
        observe(p + "proj", a.bits, self.proj.c_out)
        y = membrane_shortcut(self.proj_bn(self.proj(a.node), training), x, self.lif, bank, p + "proj")
        z = self.fc1(y, training, bank)
        observe(p + "fc2", z.bits, self.fc2.c_out)
        return membrane_shortcut(self.fc2_bn(self.fc2(z.node), training), y, self.lif, bank, p + "fc2")

    def named_parameters(self, prefix=""):
        yield from self.cm.named_parameters(prefix)
        if self.attn_bn is not None:
            yield from self.attn_bn.named_parameters(prefix + "attn_bn.")
        yield from self.proj.named_parameters(prefix + "proj.")
        yield from self.proj_bn.named_parameters(prefix + "proj_bn.")
        yield from self.fc1.named_parameters(prefix + "fc1.")
        yield from self.fc2.named_parameters(prefix + "fc2.")
        yield from self.fc2_bn.named_parameters(prefix + "fc2_bn.")

    def named_states(self, prefix=""):
        yield from self.cm.named_states(prefix)
        if self.attn_bn is not None:
            yield from self.attn_bn.named_states(prefix + "attn_bn.")
        yield from self.proj_bn.named_states(prefix + "proj_bn.")
        yield from self.fc1.named_states(prefix + "fc1.")
        yield from self.fc2_bn.named_states(prefix + "fc2_bn.")


@dataclass(frozen=True)
class EnergyBlock:
    name: str
    group: str
    macs: int
    steps: int
    spiking: bool


class TDFormer:

    def __init__(self, cfg):
        self.cfg = cfg
        self.schedule = cfg.schedule()
        rng = np.random.default_rng(cfg.seed)
        channels = cfg.embed_channels
        lif = cfg.lif()
        self.embed = [SpikingProjection(rng, cfg.patch_dim, channels, lif, "embed0")]
        self.embed += [SpikingProjection(rng, channels, channels, lif, "embed{}".format(i))
                       for i in range(1, cfg.conv_blocks)]
        self.blocks = [TransformerBlock(rng, cfg, i, cfg.cm if i == 0 else None) for i in range(cfg.depth)]
        self.pm = ProcessingModule(rng, channels, lif, cfg.lif(cfg.pm_v_th), cfg.pm,
                                   (cfg.clamp_b, cfg.clamp_a))
        self.head = Linear(rng, channels, cfg.num_classes, bias=True)
        # learnable per-token offsets on the first embedding membrane
        self.pos_embed = Node(rng.normal(0.0, 1.0, size=(cfg.tokens, channels)), requires_grad=True)
        if cfg.feedback and cfg.clamp_a <= cfg.pm_v_th:
            logger.warning("[Model] clamp_a=%s does not exceed pm_v_th=%s, the feedback path can never fire",
                           cfg.clamp_a, cfg.pm_v_th)
        if cfg.feedback and self.schedule.n == 1:
            logger.warning("[Model] a single sub-network never runs the feedback path, %s and %s stay unused",
                           cfg.cm, cfg.pm)

    @property
    def cm_variant(self):
        return self.cfg.cm

    @property
    def pm_variant(self):
        return self.cfg.pm

    @property
    def trained(self):
        return self.embed[0].bn.state.initialized

    def prepare(self, images, requires_grad=False):
        return Node(patchify(np.asarray(images), self.cfg.patch_size), requires_grad=requires_grad)

    def forward_segment(self, x, s_td, training=False, bank=None):
        first = self.embed[0]
        s = fire_sequence(add(first.pre(x, training), self.pos_embed), first.lif, bank, first.name)
        for projection in self.embed[1:]:
            s = projection(s, training, bank)
        for i, block in enumerate(self.blocks):
            s = block(s, s_td if i == 0 else None, training, bank)
        pooled = reduce_mean(s.node, axis=2)
        observe("head", pooled.values, self.cfg.num_classes)
        return s, self.head(pooled)

    def forward(self, x, training=False, feedback=None, hidden_hook=None):
        feedback = self.cfg.feedback if feedback is None else feedback
        return run_subnet_chain(x, self.schedule, self, feedback=feedback, training=training,
                                persist_membrane=self.cfg.persist_membrane, hidden_hook=hidden_hook)

    def named_parameters(self):
        for i, projection in enumerate(self.embed):
            yield from projection.named_parameters("embed{}.".format(i))
        yield "pos_embed", self.pos_embed
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters("block{}.".format(i))
        yield from self.pm.named_parameters("pm.")
        yield from self.head.named_parameters("head.")

    def named_states(self):
        for i, projection in enumerate(self.embed):
            yield from projection.named_states("embed{}.".format(i))
        for i, block in enumerate(self.blocks):
            yield from block.named_states("block{}.".format(i))
        yield from self.pm.named_states("pm.")

    def parameters(self):
        return [node for _, node in self.named_parameters()]

    def zero_grad(self):
        for node in self.parameters():
            node.zero_grad()

    def energy_blocks(self, feedback=None):
        """Every block priced by the energy model, with MACs per step and sample."""
        cfg = self.cfg
        feedback = cfg.feedback if feedback is None else feedback
        n, c, hidden, T = cfg.tokens, cfg.embed_channels, cfg.hidden_channels, cfg.T
        lengths = self.schedule.lengths
        pm_steps = T - lengths[-1] if feedback else 0
        cm_steps = T - lengths[0] if feedback else 0
        attention_macs = 2 * n * n * c if cfg.attention in SCALED_KINDS else 2 * n * c

        blocks = [EnergyBlock("embed0", "baseline", n * cfg.patch_dim * c, T, False)]
        blocks += [EnergyBlock("embed{}".format(i), "baseline", n * c * c, T, True)
                   for i in range(1, cfg.conv_blocks)]
        for block in self.blocks:
            p = block.prefix
            blocks += [EnergyBlock(p + key, "baseline", n * c * c, T, True) for key in block.cm.projections]
            blocks.append(EnergyBlock(p + "attn", "baseline", attention_macs, T, True))
            blocks.append(EnergyBlock(p + "proj", "baseline", n * c * c, T, True))
            blocks.append(EnergyBlock(p + "fc1", "baseline", n * c * hidden, T, True))
            blocks.append(EnergyBlock(p + "fc2", "baseline", n * hidden * c, T, True))
            blocks += [EnergyBlock("{}td.{}".format(p, key), "cm", n * c * c, cm_steps, True)
                       for key in block.cm.td_weights]
        pm = self.pm
        if pm.variant == "v3":
            blocks.append(EnergyBlock(pm.prefix + "scale", "pm", n * c, pm_steps, True))
        blocks += [EnergyBlock(mixer.name, "pm", n * c * c, pm_steps, True) for mixer in pm.mixers]
        blocks.append(EnergyBlock(pm.prefix + "spatial", "pm", 2 * n * c, pm_steps, True))
        blocks.append(EnergyBlock("head", "baseline", c * cfg.num_classes, T, False))
        return blocks


def stage_losses(logits, target):
    return [cross_entropy(reduce_mean(o, axis=0), target) for o in logits]


def weighted_loss(stages, alphas):
    if len(stages) != len(alphas):
        raise ConfigurationError("{} stages for {} weights".format(len(stages), len(alphas)), field="alphas")
    if abs(sum(alphas) - 1.0) > 1e-9 or any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigurationError("weights must lie in [0, 1] and sum to 1, got {}".format(list(alphas)),
                                 field="alphas")
    total = scale(stages[0], alphas[0])
    for alpha, stage in zip(alphas[1:], stages[1:]):
        total = add(total, scale(stage, alpha))
    return total


def tdformer_loss(logits, target, alphas):
    """Sum of alpha-weighted cross-entropies of each stage's time-averaged logits."""
    if len(logits) != len(alphas):
        raise ConfigurationError("{} stages for {} weights".format(len(logits), len(alphas)), field="alphas")
    return weighted_loss(stage_losses(logits, target), alphas)


def combine_stages(values, alphas):
    """Float version of ``weighted_loss`` with the same operation order."""
    total = alphas[0] * values[0]
    for alpha, value in zip(alphas[1:], values[1:]):
        total = total + alpha * value
    return total


class SGD:

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, buf in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.values
            buf *= self.momentum
            buf += g
            p.values = p.values - lr * buf


class AdamW:
    """Adam with weight decay applied to the parameters, not the gradient."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.values = p.values * (1 - lr * self.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = ("adamw", "sgd")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    momentum: float = 0.9
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("must be >= 1", field="epochs")
        if self.batch_size < 1:
            raise ConfigurationError("must be >= 1", field="batch_size")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError("expected one of {}".format(OPTIMIZERS), field="optimizer")
        if self.lr < 0:
            raise ConfigurationError("must be >= 0", field="lr")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError("expected cosine or constant", field="lr_schedule")

    def make_optimizer(self, params):
        if self.optimizer == "sgd":
            return SGD(params, self.lr, self.momentum, self.weight_decay)
        return AdamW(params, self.lr, weight_decay=self.weight_decay)

    def lr_at(self, step, total_steps):
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    stage_losses: list
    train_accuracy: float
    test_accuracy: float
    firing_rates: dict
    wall_clock: float


@dataclass
class TrainReport:
    alphas: tuple
    epochs: list = field(default_factory=list)
    model: Optional[TDFormer] = None

    @property
    def final(self):
        return self.epochs[-1]


def _batches(count, batch_size, order=None):
    order = np.arange(count) if order is None else order
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def train(dataset, cfg, epochs=None, training=None, model=None):
    """Minimise the multi-stage loss on ``dataset``; deterministic for a fixed ``cfg.seed``."""
    training = training or TrainingConfig()
    epochs = training.epochs if epochs is None else epochs
    if dataset.x_train.shape[1] != cfg.T:
        raise ConfigurationError("dataset has {} steps, model expects {}".format(
            dataset.x_train.shape[1], cfg.T), field="T")
    model = model or TDFormer(cfg)
    alphas = model.schedule.alphas
    optimizer = training.make_optimizer(model.parameters())
    rng = np.random.default_rng([cfg.seed, 1])
    count = len(dataset.y_train)
    total_steps = epochs * math.ceil(count / training.batch_size)
    report = TrainReport(alphas=alphas, model=model)
    step = 0

    for epoch in range(epochs):
        started = time.perf_counter()
        stage_sums = np.zeros(len(alphas))
        correct = 0
        with record_activity() as recorder:
            for batch, idx in enumerate(_batches(count, training.batch_size, rng.permutation(count))):
                target = dataset.y_train[idx]
                result = model.forward(model.prepare(dataset.x_train[idx]), training=True)
                stages = stage_losses(result.logits, target)
                loss = weighted_loss(stages, alphas)
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(
                        "loss became non-finite at epoch {} batch {}".format(epoch, batch),
                        {"epoch": epoch, "batch": batch, "stage_losses": [s.item() for s in stages]})
                model.zero_grad()
                loss.backward()
                optimizer.step(training.lr_at(step, total_steps))
                step += 1
                stage_sums += np.array([s.item() for s in stages]) * len(idx)
                correct += int(np.sum(result.logits[-1].values.mean(axis=0).argmax(axis=1) == target))

        means = [float(v) for v in stage_sums / count]
        record = EpochRecord(epoch=epoch,
                             loss=combine_stages(means, alphas),
                             stage_losses=means,
                             train_accuracy=correct / count,
                             test_accuracy=evaluate(model, dataset.x_test, dataset.y_test, training.batch_size),
                             firing_rates=recorder.firing_rates(),
                             wall_clock=time.perf_counter() - started)
        report.epochs.append(record)
        logger.info("[Train] epoch %s loss %.4f train acc %.3f test acc %.3f (%.1fs)",
                    epoch, record.loss, record.train_accuracy, record.test_accuracy, record.wall_clock)
    return report


def _forward_eval(model, x, feedback, training):
    with no_grad():
        return model.forward(model.prepare(x), training=training, feedback=feedback)


def evaluate(model, x, y, batch_size=64, feedback=None):
    """Accuracy of the final stage's time-averaged logits, batch norm in eval mode."""
    correct = 0
    for idx in _batches(len(y), batch_size):
        result = _forward_eval(model, x[idx], feedback, training=False)
        correct += int(np.sum(result.logits[-1].values.mean(axis=0).argmax(axis=1) == y[idx]))
    return correct / len(y)


def collect_features(model, x, batch_size=64, feedback=None):
    """Final-block spikes of every segment, concatenated back to [T, B, N, C]."""
    training = not model.trained
    if training:
        logger.warning("[Analyze] batch-norm statistics unset, features use batch statistics")
    chunks = []
    for idx in _batches(len(x), batch_size):
        result = _forward_eval(model, x[idx], feedback, training)
        chunks.append(np.concatenate([h.bits for h in result.hidden], axis=0))
    return SpikeTensor.from_bits(np.concatenate(chunks, axis=1))


def measure_activity(model, x, batch_size=64, feedback=None):
    """Activity recorder filled by one evaluation pass over ``x``."""
    training = not model.trained
    with record_activity() as recorder:
        for idx in _batches(len(x), batch_size):
            _forward_eval(model, x[idx], feedback, training)
    return recorder


def model_config_hash(cfg):
    canonical = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf8")).hexdigest()


def save_checkpoint(model, path, config_hash=None):
    """Write parameters and BN statistics; ``config_hash`` defaults to the hash of the model settings."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "precision": get_precision(),
        "seed": model.cfg.seed,
        "config_hash": config_hash or model_config_hash(model.cfg),
        "config": asdict(model.cfg),
        "parameters": {name: {"shape": list(node.shape), "values": node.values.ravel().tolist()}
                       for name, node in model.named_parameters()},
        "batch_norm": {name: {"running_mean": state.running_mean.tolist(),
                              "running_var": state.running_var.tolist(),
                              "num_batches": state.num_batches}
                       for name, state in model.named_states()},
    }
    with open(path, "w") as f:
        json.dump(payload, f)
    logger.info("[Output] checkpoint written to %s", path)


def load_checkpoint(path):
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError("{} is not a checkpoint".format(path), field="checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError("unsupported checkpoint version {}".format(payload.get("version")),
                                 field="checkpoint")
    model = TDFormer(ModelConfig.from_dict(payload["config"]))
    dtype = get_dtype()
    for name, node in model.named_parameters():
        entry = payload["parameters"][name]
        node.values = np.asarray(entry["values"], dtype=dtype).reshape(entry["shape"])
    for name, state in model.named_states():
        entry = payload["batch_norm"][name]
        state.running_mean = np.asarray(entry["running_mean"], dtype=dtype)
        state.running_var = np.asarray(entry["running_var"], dtype=dtype)
        state.num_batches = entry["num_batches"]
    return model
