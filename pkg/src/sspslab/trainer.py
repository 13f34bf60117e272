"""End-to-end training orchestration for the three positive-sampling modes.

A run is fully determined by its config and seed: corpus generation, view
sampling, batch order, pseudo-positive draws and weight init all consume
named, independently seeded rng streams, and every artifact (checkpoint,
metrics log) is byte-reproducible.  The three modes share one loop:

* ``ssl``         same-utterance positives throughout;
* ``supervised``  after the warm-up epochs, positives are views of another
                  recording of the anchor's speaker (hidden labels read only
                  through the corpus sampling entry point);
* ``ssps``        after ``enable_epoch``, the positive embedding of each item
                  is replaced by a queue-served pseudo-positive chosen via
                  per-epoch clustering of reference representations, falling
                  back to the standard positive on any miss.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses, nncore, ssps as ssps_mod, synthgen
from .evaluation import MetricsReport, evaluate_model
from .nncore import (
    Mlp,
    ModelPair,
    NonFiniteGradientError,
    Schedule,
    backward_full,
    build_model_pair,
    forward_full,
    init_optimizer,
    optimizer_step,
    read_checkpoint,
    schedule_value,
    write_checkpoint,
)
from .synthgen import CorpusConfig, TrialList, build_corpus, build_trials, sample_views, split_corpus
from .ssps import PositiveQueue, ReferenceQueue, SspsConfig

__all__ = [
    "OptimizerConfig",
    "ScheduleConfig",
    "LossConfig",
    "ModelConfig",
    "EvalConfig",
    "RunConfig",
    "RunArtifacts",
    "TrainingDivergedError",
    "TrainingRun",
    "default_config",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "save_config",
    "run_training",
    "run_eval",
    "resume",
    "run_sweep",
]

FRAMEWORKS = ("simclr", "dino")
POS_SAMPLING = ("ssl", "ssps", "supervised")

_STREAM_NAMES = ("init", "trials", "batch", "views", "positives", "ssps")


class TrainingDivergedError(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient; carries the
    path of the diagnostic checkpoint written before aborting."""

    def __init__(self, message: str, checkpoint_path: Path):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    ema_momentum_base: float = 0.996
    ema_momentum_end: float = 1.0


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "step_decay"
    decay: float = 0.95
    decay_every_epochs: int = 5
    warmup_epochs: int = 0
    end: float = 0.0


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.03
    student_temperature: float = 0.1
    teacher_temperature: float = 0.04
    center_momentum: float = 0.9


@dataclass(frozen=True)
class ModelConfig:
    encoder_hidden: tuple[int, ...] = (64, 64)
    representation_dim: int = 32
    projector_hidden: int = 64
    embedding_dim: int = 128


@dataclass(frozen=True)
class EvalConfig:
    n_eval_speakers: int = 16
    n_target_trials: int = 2000
    n_nontarget_trials: int = 2000


@dataclass(frozen=True)
class RunConfig:
    framework: str = "simclr"
    pos_sampling: str = "ssl"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    ssps: SspsConfig = field(default_factory=SspsConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    epochs_total: int = 50
    epochs_warmup: int = 40
    batch_size: int = 64
    eval_every: int = 10
    seed: int = 0
    output_dir: str = "runs/out"

    def __post_init__(self) -> None:
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"framework must be one of {FRAMEWORKS}")
        if self.pos_sampling not in POS_SAMPLING:
            raise ValueError(f"pos_sampling must be one of {POS_SAMPLING}")
        if not 0 <= self.epochs_warmup <= self.epochs_total:
            raise ValueError("need 0 <= epochs_warmup <= epochs_total")
        if self.batch_size < 1 or self.batch_size > self.corpus.n_utterances:
            raise ValueError("need 1 <= batch_size <= corpus size")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.pos_sampling == "supervised" and self.corpus.recordings_per_speaker < 2:
            raise ValueError("supervised sampling needs >= 2 recordings per speaker")


def default_config(framework: str, pos_sampling: str = "ssl", **overrides) -> RunConfig:
    """Desk-scale defaults per framework; clustering granularity defaults to
    the number of recordings in the train corpus and clustering starts right
    after the warm-up epochs."""
    if framework == "simclr":
        kwargs: dict = dict(
            framework="simclr",
            pos_sampling=pos_sampling,
            optimizer=OptimizerConfig(kind="adam", lr=1e-3),
            schedule=ScheduleConfig(kind="step_decay", decay=0.95, decay_every_epochs=5),
            epochs_total=50,
            epochs_warmup=40,
            batch_size=64,
        )
    elif framework == "dino":
        kwargs = dict(
            framework="dino",
            pos_sampling=pos_sampling,
            optimizer=OptimizerConfig(kind="sgd_momentum", lr=0.1, momentum=0.9, weight_decay=5e-5),
            schedule=ScheduleConfig(kind="cosine_with_warmup", warmup_epochs=10),
            epochs_total=50,
            epochs_warmup=40,
            batch_size=32,
        )
    else:
        raise ValueError(f"framework must be one of {FRAMEWORKS}")
    kwargs.update(overrides)
    corpus = kwargs.setdefault("corpus", CorpusConfig())
    kwargs.setdefault(
        "ssps",
        SspsConfig(
            n_clusters=corpus.n_recordings,
            n_neighbor_clusters=1,
            enable_epoch=kwargs["epochs_warmup"],
        ),
    )
    return RunConfig(**kwargs)


# --------------------------------------------------------------------------
# config <-> flat sectioned key/value text


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "run": {
            "framework": cfg.framework,
            "pos_sampling": cfg.pos_sampling,
            "epochs_total": cfg.epochs_total,
            "epochs_warmup": cfg.epochs_warmup,
            "batch_size": cfg.batch_size,
            "eval_every": cfg.eval_every,
            "seed": cfg.seed,
            "output_dir": cfg.output_dir,
        },
        "corpus": asdict(cfg.corpus),
        "ssps": asdict(cfg.ssps),
        "optimizer": asdict(cfg.optimizer),
        "schedule": asdict(cfg.schedule),
        "loss": asdict(cfg.loss),
        "model": {**asdict(cfg.model), "encoder_hidden": list(cfg.model.encoder_hidden)},
        "eval": asdict(cfg.evaluation),
    }


_SECTION_TYPES = {
    "run": ("framework", "pos_sampling", "epochs_total", "epochs_warmup",
            "batch_size", "eval_every", "seed", "output_dir"),
    "corpus": CorpusConfig,
    "ssps": SspsConfig,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "loss": LossConfig,
    "model": ModelConfig,
    "eval": EvalConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig, rejecting unknown sections or keys."""
    unknown = set(data) - set(_SECTION_TYPES)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    def build(section: str, cls):
        payload = dict(data.get(section, {}))
        valid = {f.name for f in cls.__dataclass_fields__.values()} if hasattr(cls, "__dataclass_fields__") else set(cls)
        extra = set(payload) - valid
        if extra:
            raise ValueError(f"unknown keys in [{section}]: {sorted(extra)}")
        return payload

    run_keys = build("run", _SECTION_TYPES["run"])
    model_payload = build("model", ModelConfig)
    if "encoder_hidden" in model_payload:
        model_payload["encoder_hidden"] = tuple(model_payload["encoder_hidden"])
    return RunConfig(
        corpus=CorpusConfig(**build("corpus", CorpusConfig)),
        ssps=SspsConfig(**build("ssps", SspsConfig)),
        optimizer=OptimizerConfig(**build("optimizer", OptimizerConfig)),
        schedule=ScheduleConfig(**build("schedule", ScheduleConfig)),
        loss=LossConfig(**build("loss", LossConfig)),
        model=ModelConfig(**model_payload),
        evaluation=EvalConfig(**build("eval", EvalConfig)),
        **run_keys,
    )


def load_config(path: str | Path) -> RunConfig:
    try:
        import tomllib  # py >= 3.11
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    lines = []
    for section, payload in config_to_dict(cfg).items():
        lines.append(f"[{section}]")
        for key, value in payload.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


@dataclass
class RunArtifacts:
    checkpoint_path: Path
    metrics_path: Path
    diagnostics_path: Path
    trials_path: Path
    config: RunConfig
    final_report: MetricsReport | None = None


# --------------------------------------------------------------------------


class TrainingRun:
    """Holds the full mutable training state; one instance per run/resume."""

    def __init__(self, cfg: RunConfig, resume_state: tuple[dict, dict] | None = None):
        self.cfg = cfg
        self.out_dir = Path(cfg.output_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        world_cfg = replace(
            cfg.corpus, n_speakers=cfg.corpus.n_speakers + cfg.evaluation.n_eval_speakers
        )
        world = build_corpus(world_cfg)
        self.corpus, self.corpus_eval = split_corpus(world, cfg.evaluation.n_eval_speakers)
        self.n_train = self.corpus.n_utterances
        self.steps_per_epoch = self.n_train // cfg.batch_size

        seq = np.random.SeedSequence(cfg.seed)
        children = seq.spawn(len(_STREAM_NAMES))
        self.rng = {name: np.random.default_rng(c) for name, c in zip(_STREAM_NAMES, children)}

        self.trials = build_trials(
            self.corpus_eval,
            cfg.evaluation.n_target_trials,
            cfg.evaluation.n_nontarget_trials,
            self.rng["trials"],
        )

        mc = cfg.model
        encoder_dims = [cfg.corpus.input_dim, *mc.encoder_hidden, mc.representation_dim]
        if cfg.framework == "simclr":
            self.pair = build_model_pair("symmetric", encoder_dims, self.rng["init"])
            self.embedding_dim = mc.representation_dim
        else:
            projector_dims = [mc.representation_dim, mc.projector_hidden, mc.embedding_dim]
            self.pair = build_model_pair(
                "student_teacher", encoder_dims, self.rng["init"], projector_dims
            )
            self.embedding_dim = mc.embedding_dim

        oc = cfg.optimizer
        self.optimizer = init_optimizer(
            oc.kind,
            self.pair.student_parameters(),
            lr=oc.lr,
            momentum=oc.momentum,
            beta1=oc.beta1,
            beta2=oc.beta2,
            epsilon=oc.epsilon,
            weight_decay=oc.weight_decay,
        )

        total_steps = max(cfg.epochs_total * self.steps_per_epoch, 1)
        sc = cfg.schedule
        self.lr_schedule = Schedule(
            kind=sc.kind,
            base=oc.lr,
            total_steps=total_steps,
            end=sc.end,
            warmup_steps=sc.warmup_epochs * self.steps_per_epoch,
            decay=sc.decay,
            every_epochs=sc.decay_every_epochs,
            steps_per_epoch=self.steps_per_epoch,
        )
        self.ema_schedule = Schedule(
            kind="cosine_momentum",
            base=oc.ema_momentum_base,
            end=oc.ema_momentum_end,
            total_steps=total_steps,
        )

        self.simclr_params = losses.SimclrParams(temperature=cfg.loss.temperature)
        self.dino_params = losses.DinoParams(
            student_temperature=cfg.loss.student_temperature,
            teacher_temperature=cfg.loss.teacher_temperature,
            center=np.zeros(self.embedding_dim),
            center_momentum=cfg.loss.center_momentum,
        )

        self.queue_reference = ReferenceQueue(self.n_train, mc.representation_dim)
        self.queue_positive = PositiveQueue(cfg.ssps.n_clusters, self.embedding_dim)
        self.cluster_state: ssps_mod.ClusterState | None = None

        self.epoch = 0
        self.step = 0
        self.last_loss: float | None = None
        self.final_report: MetricsReport | None = None
        self.epoch_ssps_queries = 0
        self.epoch_ssps_fallbacks = 0

        self.metrics_path = self.out_dir / "metrics.jsonl"
        self.diagnostics_path = self.out_dir / "ssps_diagnostics.jsonl"
        self.checkpoint_path = self.out_dir / "checkpoint.ckpt"
        self.trials_path = self.out_dir / "trials.txt"

        if resume_state is not None:
            self._restore(*resume_state)
        else:
            self.metrics_path.write_text("")
            self.diagnostics_path.write_text("")
            synthgen.save_trials(self.trials, self.trials_path)
            save_config(cfg, self.out_dir / "config.toml")

    # -- persistence --------------------------------------------------------

    def _checkpoint_arrays(self) -> list[tuple[str, np.ndarray]]:
        arrays: list[tuple[str, np.ndarray]] = []
        for i, p in enumerate(self.pair.student_parameters()):
            arrays.append((f"student.{i}", p))
        if self.pair.mode == "student_teacher":
            for i, p in enumerate(self.pair.teacher_parameters()):
                arrays.append((f"teacher.{i}", p))
        for i, b in enumerate(self.optimizer.buffers):
            arrays.append((f"opt.m1.{i}", b))
        if self.optimizer.second_moments is not None:
            for i, b in enumerate(self.optimizer.second_moments):
                arrays.append((f"opt.m2.{i}", b))
        if self.cfg.framework == "dino":
            arrays.append(("dino.center", self.dino_params.center))
        arrays.append(("queue_reference.vectors", self.queue_reference.matrix()))
        pos_ids = self.queue_positive.ids()
        pos_vectors = (
            np.stack([self.queue_positive.get(int(u)) for u in pos_ids])
            if pos_ids.size
            else np.empty((0, self.embedding_dim))
        )
        arrays.append(("queue_positive.vectors", pos_vectors))
        return arrays

    def save_checkpoint(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.checkpoint_path
        header = {
            "format": "sspslab-run-v1",
            "config": config_to_dict(self.cfg),
            "epoch": self.epoch,
            "step": self.step,
            "optimizer_step_count": self.optimizer.step_count,
            "rng": {
                name: _encode_rng_state(self.rng[name].bit_generator.state)
                for name in ("batch", "views", "positives", "ssps")
            },
            "queue_reference_ids": [int(u) for u in self.queue_reference.ids()],
            "queue_positive_ids": [int(u) for u in self.queue_positive.ids()],
        }
        write_checkpoint(path, header, self._checkpoint_arrays())
        return path

    def _restore(self, header: dict, arrays: dict[str, np.ndarray]) -> None:
        self.epoch = int(header["epoch"])
        self.step = int(header["step"])
        self.optimizer.step_count = int(header["optimizer_step_count"])
        for name, state in header["rng"].items():
            self.rng[name].bit_generator.state = _decode_rng_state(state)
        for i, p in enumerate(self.pair.student_parameters()):
            self._load_into(p, arrays[f"student.{i}"])
        if self.pair.mode == "student_teacher":
            for i, p in enumerate(self.pair.teacher_parameters()):
                self._load_into(p, arrays[f"teacher.{i}"])
        for i, b in enumerate(self.optimizer.buffers):
            self._load_into(b, arrays[f"opt.m1.{i}"])
        if self.optimizer.second_moments is not None:
            for i, b in enumerate(self.optimizer.second_moments):
                self._load_into(b, arrays[f"opt.m2.{i}"])
        if self.cfg.framework == "dino":
            self.dino_params.center = arrays["dino.center"].copy()
        ref_vectors = arrays["queue_reference.vectors"]
        for u, vec in zip(header["queue_reference_ids"], ref_vectors):
            self.queue_reference.enqueue(int(u), vec)
        pos_vectors = arrays["queue_positive.vectors"]
        for u, vec in zip(header["queue_positive_ids"], pos_vectors):
            self.queue_positive.enqueue(int(u), vec)

    @staticmethod
    def _load_into(dst: np.ndarray, src: np.ndarray) -> None:
        if dst.shape != src.shape:
            raise ValueError(
                f"checkpoint array shape {src.shape} does not match config shape {dst.shape}"
            )
        dst[...] = src

    # -- training -----------------------------------------------------------

    def _ssps_active(self) -> bool:
        return (
            self.cfg.pos_sampling == "ssps"
            and self.epoch >= self.cfg.ssps.enable_epoch
            and self.cluster_state is not None
        )

    def _supervised_active(self) -> bool:
        return self.cfg.pos_sampling == "supervised" and self.epoch >= self.cfg.epochs_warmup

    def _epoch_begin(self) -> None:
        if self.cfg.pos_sampling != "ssps" or self.epoch < self.cfg.ssps.enable_epoch:
            return
        if len(self.queue_reference) < self.cfg.ssps.n_clusters:
            self.cluster_state = None  # not enough coverage yet; sampler stays inert
            return
        self.cluster_state = ssps_mod.ssps_epoch_begin(self.queue_reference, self.cfg.ssps)

    def _epoch_end(self) -> None:
        fallback_rate = (
            self.epoch_ssps_fallbacks / self.epoch_ssps_queries
            if self.epoch_ssps_queries
            else None
        )
        if self.cluster_state is not None:
            record = ssps_mod.cluster_diagnostics(
                self.cluster_state,
                self.cfg.ssps.n_neighbor_clusters,
                fallback_rate,
                speaker_lookup=self.corpus.speaker_of,  # hidden-label read: diagnostics only
            )
            record["epoch"] = self.epoch + 1
            ssps_mod.append_jsonl(self.diagnostics_path, record)
        done = self.epoch + 1
        if done % self.cfg.eval_every == 0 or done == self.cfg.epochs_total:
            report = self.evaluate()
            record = {"epoch": done, **report.as_dict(), "fallback_rate": fallback_rate}
            ssps_mod.append_jsonl(self.metrics_path, record)
            self.final_report = report

    def _batch_order(self) -> np.ndarray:
        return self.rng["batch"].permutation(self.n_train)

    def _step_simclr(self, ids: np.ndarray) -> float:
        pos_ids = None
        if self._supervised_active():
            pos_ids = np.array(
                [self.corpus.same_speaker_other_recording(int(i), self.rng["positives"]) for i in ids]
            )
        views = sample_views(self.corpus, ids, "pair", self.rng["views"], positive_indices=pos_ids)
        batch = np.vstack([views.anchors, views.positives])
        emb, _, cache = forward_full(self.pair.student_encoder, None, batch)
        b = ids.size
        anchors_emb, positives_emb = emb[:b], emb[b:]

        inputs = losses.SimclrInputs(ids, anchors_emb, positives_emb)
        if self._ssps_active():
            inputs = losses.apply_pseudo_positive(inputs, self._draw_pseudo_positives(ids))
        loss, d_anchor, d_positive = losses.simclr_loss_from_inputs(inputs, self.simclr_params)
        self._check_finite(loss)
        grads = backward_full(
            self.pair.student_encoder, None, cache, np.vstack([d_anchor, d_positive])
        )
        lr = schedule_value(self.lr_schedule, self.step)
        optimizer_step(self.optimizer, self.pair.student_parameters(), grads, lr)

        ref_reps, _ = self.pair.student_encoder.forward(views.reference_views)
        for i, utt in enumerate(ids):
            self.queue_reference.enqueue(int(utt), ref_reps[i])
            self.queue_positive.enqueue(int(utt), positives_emb[i])
        return loss

    def _step_dino(self, ids: np.ndarray) -> float:
        pos_ids = None
        if self._supervised_active():
            pos_ids = np.array(
                [self.corpus.same_speaker_other_recording(int(i), self.rng["positives"]) for i in ids]
            )
        views = sample_views(
            self.corpus, ids, "multicrop", self.rng["views"], positive_indices=pos_ids
        )
        b = ids.size
        student_in = np.vstack(views.global_views + views.local_views)
        s_emb, _, s_cache = forward_full(
            self.pair.student_encoder, self.pair.student_projector, student_in
        )
        student_views = [s_emb[k * b : (k + 1) * b] for k in range(6)]

        teacher_in = np.vstack(views.teacher_global_views)
        t_emb, _, _ = forward_full(
            self.pair.teacher_encoder, self.pair.teacher_projector, teacher_in
        )
        teacher_views = [t_emb[:b], t_emb[b:]]

        inputs = losses.DinoInputs(ids, student_views, teacher_views)
        if self._ssps_active():
            inputs = losses.apply_pseudo_positive(inputs, self._draw_pseudo_positives(ids))
        loss, view_grads = losses.dino_loss_from_inputs(inputs, self.dino_params)
        self._check_finite(loss)
        grads = backward_full(
            self.pair.student_encoder, self.pair.student_projector, s_cache, np.vstack(view_grads)
        )
        lr = schedule_value(self.lr_schedule, self.step)
        optimizer_step(self.optimizer, self.pair.student_parameters(), grads, lr)

        m = schedule_value(self.ema_schedule, self.step)
        nncore.ema_update(self.pair.teacher_parameters(), self.pair.student_parameters(), m)
        self.dino_params.center = losses.update_center(self.dino_params, t_emb)

        ref_reps, _ = self.pair.teacher_encoder.forward(views.reference_views)
        for i, utt in enumerate(ids):
            self.queue_reference.enqueue(int(utt), ref_reps[i])
            self.queue_positive.enqueue(int(utt), teacher_views[0][i])
        return loss

    def _draw_pseudo_positives(self, ids: np.ndarray) -> dict[int, np.ndarray]:
        replacements: dict[int, np.ndarray] = {}
        for utt in ids:
            self.epoch_ssps_queries += 1
            drawn = ssps_mod.sample_pseudo_positive(
                int(utt),
                self.cluster_state,
                self.queue_positive,
                self.cfg.ssps.n_neighbor_clusters,
                self.rng["ssps"],
            )
            if drawn is None:
                self.epoch_ssps_fallbacks += 1
            else:
                replacements[int(utt)] = drawn[1]
        return replacements

    def _check_finite(self, loss: float) -> None:
        if not np.isfinite(loss):
            path = self.save_checkpoint(self.out_dir / "diverged.ckpt")
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step}; diagnostic checkpoint at {path}", path
            )

    def train_epoch(self) -> None:
        self._epoch_begin()
        self.epoch_ssps_queries = 0
        self.epoch_ssps_fallbacks = 0
        order = self._batch_order()
        step_fn = self._step_simclr if self.cfg.framework == "simclr" else self._step_dino
        try:
            for k in range(self.steps_per_epoch):
                ids = order[k * self.cfg.batch_size : (k + 1) * self.cfg.batch_size]
                self.last_loss = step_fn(ids)
                self.step += 1
        except NonFiniteGradientError as exc:
            path = self.save_checkpoint(self.out_dir / "diverged.ckpt")
            raise TrainingDivergedError(f"{exc}; diagnostic checkpoint at {path}", path) from exc
        self._epoch_end()
        self.epoch += 1

    def eval_encoder(self) -> Mlp:
        """Verification uses encoder representations; the EMA branch when present."""
        return (
            self.pair.teacher_encoder
            if self.pair.mode == "student_teacher"
            else self.pair.student_encoder
        )

    def evaluate(self) -> MetricsReport:
        return evaluate_model(self.eval_encoder(), self.corpus_eval, self.trials)

    def run(self, stop_after_epoch: int | None = None) -> RunArtifacts:
        self.final_report = None
        stop = self.cfg.epochs_total if stop_after_epoch is None else min(
            stop_after_epoch, self.cfg.epochs_total
        )
        while self.epoch < stop:
            self.train_epoch()
        self.save_checkpoint()
        if self.final_report is None and self.epoch > 0:
            self.final_report = self.evaluate()
        return RunArtifacts(
            checkpoint_path=self.checkpoint_path,
            metrics_path=self.metrics_path,
            diagnostics_path=self.diagnostics_path,
            trials_path=self.trials_path,
            config=self.cfg,
            final_report=self.final_report,
        )


def _encode_rng_state(state: dict) -> dict:
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def _decode_rng_state(state: dict) -> dict:
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def run_training(cfg: RunConfig, stop_after_epoch: int | None = None) -> RunArtifacts:
    """Train from scratch per config; returns the artifact paths and report."""
    return TrainingRun(cfg).run(stop_after_epoch)


def run_eval(checkpoint_path: str | Path, trials: TrialList | str | Path) -> MetricsReport:
    """Deterministic evaluation of a checkpoint against a trial list."""
    header, arrays = read_checkpoint(checkpoint_path)
    cfg = config_from_dict(header["config"])
    run = TrainingRun(cfg, resume_state=(header, arrays))
    if not isinstance(trials, TrialList):
        trials = synthgen.load_trials(trials)
    return evaluate_model(run.eval_encoder(), run.corpus_eval, trials)


def resume(
    checkpoint_path: str | Path,
    extra_epochs: int,
    pos_sampling: str | None = None,
    output_dir: str | Path | None = None,
) -> RunArtifacts:
    """Continue a run from its checkpoint, optionally switching the positive
    sampling mode (the resume-then-refine protocol).

    Restores parameters, optimizer state, queue contents and rng streams, so
    a split run reproduces a straight run bit-exactly.  Training continues
    for ``extra_epochs``; if that overshoots the stored schedule horizon,
    ``epochs_total`` is extended (schedule tails clamp at their endpoints).
    """
    if extra_epochs < 0:
        raise ValueError("extra_epochs must be >= 0")
    header, arrays = read_checkpoint(checkpoint_path)
    cfg = config_from_dict(header["config"])
    target_epoch = int(header["epoch"]) + extra_epochs
    if pos_sampling is not None:
        cfg = replace(cfg, pos_sampling=pos_sampling)
    if output_dir is not None:
        cfg = replace(cfg, output_dir=str(output_dir))
    if target_epoch > cfg.epochs_total:
        cfg = replace(cfg, epochs_total=target_epoch)
    run = TrainingRun(cfg, resume_state=(header, arrays))
    return run.run(stop_after_epoch=target_epoch)


def run_sweep(base_cfg: RunConfig, grid: dict, out_dir: str | Path) -> Path:
    """Run the cross product of a comparison grid and write a summary CSV.

    ``grid`` may list ``framework``, ``pos_sampling``, ``n_clusters``,
    ``n_neighbor_clusters`` and ``seeds``; missing axes default to the base
    config's single value.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axes = {
        "framework": grid.get("framework", [base_cfg.framework]),
        "pos_sampling": grid.get("pos_sampling", [base_cfg.pos_sampling]),
        "n_clusters": grid.get("n_clusters", [base_cfg.ssps.n_clusters]),
        "n_neighbor_clusters": grid.get(
            "n_neighbor_clusters", [base_cfg.ssps.n_neighbor_clusters]
        ),
        "seeds": grid.get("seeds", [base_cfg.seed]),
    }
    unknown = set(grid) - set(axes)
    if unknown:
        raise ValueError(f"unknown grid axes: {sorted(unknown)}")

    rows = []
    for fw, mode, k, m, seed in itertools.product(
        axes["framework"], axes["pos_sampling"], axes["n_clusters"],
        axes["n_neighbor_clusters"], axes["seeds"],
    ):
        name = f"{fw}_{mode}_K{k}_M{m}_seed{seed}"
        cfg = default_config(
            fw,
            mode,
            corpus=base_cfg.corpus,
            ssps=replace(
                base_cfg.ssps, n_clusters=int(k), n_neighbor_clusters=int(m)
            ),
            seed=int(seed),
            output_dir=str(out_dir / name),
            epochs_total=base_cfg.epochs_total,
            epochs_warmup=base_cfg.epochs_warmup,
            eval_every=base_cfg.eval_every,
            evaluation=base_cfg.evaluation,
        )
        report = run_training(cfg).final_report
        rows.append(
            {
                "framework": fw,
                "pos_sampling": mode,
                "n_clusters": k,
                "n_neighbor_clusters": m,
                "seed": seed,
                **(report.as_dict() if report else {}),
            }
        )

    summary = out_dir / "summary.csv"
    fieldnames = list(rows[0].keys())
    with open(summary, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return summary
