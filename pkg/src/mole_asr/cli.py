"""Pipeline command suite.

Nine subcommands drive the whole workflow from one master seed: corpus
generation, per-language expert training, the multilingual baseline,
fusion training, distillation into a student, evaluation, the two
ablation sweeps, and hidden-state dumps. Every command writes a
reloadable config snapshot (config.txt) and a line-delimited metrics
log (metrics.jsonl) into its run directory, never mutates its inputs
(checked by pre/post digests), and reproduces identical artifacts when
rerun with the same inputs.

Parameter precedence: explicit command-line flag > --config file
(flat key=value lines, '#' comments) > built-in default. All
randomness flows from --seed through named substreams, so the corpus,
backbone init, batching order, and distillation coin flips can be
varied independently.

Exit codes: 0 success, 2 usage errors (unknown command, bad flag or
value, missing input artifact), 1 runtime failures. All errors print
one machine-parseable "error: ..." line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .corpus import CorpusConfig, build_corpus, load_corpus, save_corpus, substream
from .distill import KDConfig, materialize_layer_set, train_student
from .evaluation import (
    AGNOSTIC,
    AWARE,
    ExpertSetHandle,
    SingleModelHandle,
    dump_hidden,
    evaluate,
    render_wer_table,
    separability,
)
from .lora import (
    KIND_COMBINER,
    KIND_EXPERT,
    KIND_STUDENT,
    bundle_digest,
    load_bundle,
    save_bundle,
)
from .model import (
    ModelConfig,
    Transformer,
    backbone_bundle,
    backbone_from_bundle,
    init_weights,
    lift_adapters,
    weights_digest,
)
from .mole import MoleModel, restore_mole, router_accuracy, train_mole
from .training import (
    SamplingStrategy,
    TrainConfig,
    UNIFORM,
    WEIGHTED,
    train_expert,
    train_multilingual_lora,
)

SPLITS = ("train", "dev", "test")
KD_VARIANTS = ("full", "logits", "half-rank")


class UsageError(Exception):
    """Bad invocation: unknown flag, bad value, or missing input."""


# ---------------------------------------------------------------------------
# parameter plumbing: converters, formatting, config files, snapshots
# ---------------------------------------------------------------------------

def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{s}'")


def _opt_str(s: str) -> str | None:
    return s.strip() or None


def _opt_int(s: str) -> int | None:
    return int(s) if s.strip() else None


def _csv_ints(s: str) -> tuple[int, ...]:
    items = [x.strip() for x in s.split(",") if x.strip()]
    if not items:
        raise ValueError("expected at least one integer")
    return tuple(int(x) for x in items)


def _opt_csv_strs(s: str) -> tuple[str, ...] | None:
    items = tuple(x.strip() for x in s.split(",") if x.strip())
    return items or None


def _opt_csv_floats(s: str) -> tuple[float, ...] | None:
    items = [x.strip() for x in s.split(",") if x.strip()]
    return tuple(float(x) for x in items) or None


def _parse_layer_set(s: str) -> tuple[str, ...] | None:
    t = s.strip().lower()
    if t in ("", "all"):
        return None
    if t in ("none", "logits", "logits-only"):
        return ()
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _format_layer_set(v) -> str:
    if v is None:
        return "all"
    if not v:
        return "none"
    return ",".join(v)


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class Param:
    name: str                      # resolution key; flag is --name-with-dashes
    parse: Callable[[str], object]
    default: object
    help: str = ""
    fmt: Callable[[object], str] | None = None

    def format(self, value) -> str:
        return (self.fmt or _format_value)(value)


@dataclass(frozen=True)
class Command:
    name: str
    help: str
    params: tuple[Param, ...]
    run: Callable[[dict, "Command"], int]


class _Parser(argparse.ArgumentParser):
    # funnel argparse's own failures through the UsageError path so every
    # bad invocation prints one "error:" line and exits 2
    def error(self, message):
        raise UsageError(message)


def _read_config_file(path: Path, table: dict[str, Param]) -> dict:
    if not path.is_file():
        raise UsageError(f"missing config file at {path}")
    out: dict = {}
    for ln, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{ln}: expected key=value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in table:
            raise UsageError(f"{path}:{ln}: unknown config key '{key}'")
        try:
            out[key] = table[key].parse(value.strip())
        except (TypeError, ValueError) as e:
            raise UsageError(f"{path}:{ln}: bad value for '{key}': {e}")
    return out


def _resolve_params(cmd: Command, args: argparse.Namespace) -> dict:
    """defaults, then config file, then explicit CLI flags."""
    table = {q.name: q for q in cmd.params}
    values = {q.name: q.default for q in cmd.params}
    cfg_path = getattr(args, "config", None)
    if cfg_path is not None:
        values.update(_read_config_file(Path(cfg_path), table))
    for key, val in vars(args).items():
        if key in table:        # SUPPRESS keeps unset flags out of vars()
            values[key] = val
    return values


def _require(p: dict, name: str):
    if p.get(name) in (None, ()):
        raise UsageError(f"missing required parameter: {name}")
    return p[name]


def _write_snapshot(path: Path, cmd: Command, values: dict) -> None:
    lines = [
        f"# {cmd.name} run snapshot; rerun with: mole-asr {cmd.name} --config {path}",
        f"# command={cmd.name}",
    ]
    for q in sorted(cmd.params, key=lambda q: q.name):
        lines.append(f"{q.name}={q.format(values[q.name])}")
    path.write_text("\n".join(lines) + "\n")


def _human_line(record: dict) -> str:
    bits = []
    for k, v in record.items():
        if k == "event" or isinstance(v, (dict, list, tuple)):
            continue
        bits.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return record.get("event", "info") + ": " + " ".join(bits)


class Run:
    """Run directory with a config snapshot and an append-only metrics log.

    The log is truncated on creation so a rerun produces byte-identical
    artifacts; training loops rewrite it with their evaluation records
    and summary records are appended afterwards.
    """

    def __init__(self, cmd: Command, p: dict) -> None:
        self.dir = Path(p["run_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.json_mode = bool(p.get("json_metrics"))
        _write_snapshot(self.dir / "config.txt", cmd, p)
        self.metrics_path = self.dir / "metrics.jsonl"
        self.metrics_path.write_text("")

    def emit(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with open(self.metrics_path, "a") as f:
            f.write(line + "\n")
        print(line if self.json_mode else _human_line(record))


# ---------------------------------------------------------------------------
# shared input loading and validation
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _input_digests(paths) -> dict[str, str]:
    return {str(f): _sha256(Path(f)) for f in paths if Path(f).is_file()}


def _check_inputs_unchanged(pre: dict[str, str]) -> None:
    changed = [f for f, d in pre.items()
               if not Path(f).is_file() or _sha256(Path(f)) != d]
    if changed:
        raise RuntimeError(
            "input artifacts mutated during run: " + ", ".join(sorted(changed)))


def _corpus_files(p: dict, key: str = "corpus") -> list[Path]:
    root = Path(p[key])
    files = [root / "corpus.json", root / "manifest.jsonl"]
    feats = root / "feats"
    if feats.is_dir():
        files.extend(sorted(feats.glob("*.bin")))
    return files


def _load_corpus_checked(p: dict, key: str = "corpus"):
    root = Path(p[key])
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise UsageError(f"missing corpus manifest at {manifest}")
    return load_corpus(root)


def _model_config(p: dict) -> ModelConfig:
    try:
        return ModelConfig(
            d_model=p["d_model"], n_heads=p["n_heads"],
            n_enc_layers=p["enc_layers"], n_dec_layers=p["dec_layers"],
            feature_dim=p["feature_dim"], vocab_size=p["vocab_size"],
            max_decode_len=p["max_decode_len"],
            max_source_len=p["max_source_len"],
            ff_mult=p["ff_mult"], n_languages=p["model_languages"])
    except ValueError as e:
        raise UsageError(f"bad model geometry: {e}")


def _build_model(p: dict) -> tuple[Transformer, dict, Path | None]:
    """Backbone from a kind-0 bundle file, or regenerated from the seed.

    When --backbone is given it wins outright; the model geometry flags
    are ignored in favour of the configuration stored in the file.
    """
    path = p.get("backbone")
    if path:
        f = Path(path)
        if not f.is_file():
            raise UsageError(f"missing backbone bundle at {f}")
        config, weights = backbone_from_bundle(load_bundle(f))
        return Transformer(config, weights), weights, f
    config = _model_config(p)
    weights = init_weights(config, substream(p["seed"], "backbone"))
    return Transformer(config, weights), weights, None


def _check_corpus_model(corpus, config: ModelConfig) -> None:
    cc = corpus.config
    problems = []
    if cc.feature_dim != config.feature_dim:
        problems.append(
            f"feature_dim {cc.feature_dim} != model {config.feature_dim}")
    if cc.vocab_size != config.vocab_size:
        problems.append(
            f"vocab_size {cc.vocab_size} != model {config.vocab_size}")
    if cc.text_base != config.text_base:
        problems.append(
            f"text_base {cc.text_base} != model {config.text_base}")
    if cc.max_tokens > config.max_decode_len - 3:
        problems.append(
            f"max_tokens {cc.max_tokens} exceeds decode budget "
            f"{config.max_decode_len - 3}")
    if corpus.n_languages > config.n_languages:
        problems.append(
            f"{corpus.n_languages} corpus languages exceed the model's "
            f"{config.n_languages} LID slots")
    if problems:
        raise UsageError("corpus/model mismatch: " + "; ".join(problems))


def _load_bundle_checked(path) -> "object":
    f = Path(path)
    if not f.is_file():
        raise UsageError(f"missing bundle at {f}")
    return load_bundle(f)


def _check_backbone_ref(bundle, model: Transformer, label: str) -> None:
    ref = bundle.metadata.get("backbone",
                              bundle.metadata.get("backbone_digest"))
    if ref is not None and ref != weights_digest(model.weights):
        raise UsageError(
            f"{label} was trained against a different backbone "
            "(weights digest mismatch)")


def _load_experts(paths, model: Transformer, corpus,
                  require_full: bool = True) -> list:
    bundles = []
    for path in paths:
        b = _load_bundle_checked(path)
        if b.kind != KIND_EXPERT:
            raise UsageError(f"{path} is not an expert bundle (kind {b.kind})")
        if "language_index" not in b.metadata:
            raise UsageError(f"{path} lacks language_index metadata")
        _check_backbone_ref(b, model, str(path))
        bundles.append(b)
    bundles.sort(key=lambda b: int(b.metadata["language_index"]))
    idx = [int(b.metadata["language_index"]) for b in bundles]
    if len(set(idx)) != len(idx):
        raise UsageError(f"duplicate expert language indices: {idx}")
    if require_full and idx != list(range(corpus.n_languages)):
        raise UsageError(
            f"need one expert per corpus language "
            f"0..{corpus.n_languages - 1}, got indices {idx}")
    if not require_full and any(not 0 <= k < corpus.n_languages for k in idx):
        raise UsageError(f"expert language indices {idx} outside corpus range")
    return bundles


def _train_config(p: dict, rank: int) -> TrainConfig:
    try:
        return TrainConfig(
            max_steps=p["steps"], frame_budget=p["frame_budget"],
            peak_lr=p["peak_lr"], warmup_frac=p["warmup_frac"],
            weight_decay=p["weight_decay"], seed=p["seed"], rank=rank,
            eval_every=p["eval_every"], patience=p["patience"],
            dev_utts_per_language=p["dev_utts"],
            track_dev_wer=p["track_dev_wer"])
    except ValueError as e:
        raise UsageError(f"bad training settings: {e}")


def _save_backbone_artifact(run: Run, model: Transformer, weights: dict,
                            backbone_path: Path | None) -> None:
    # keep the exact frozen backbone next to bundles trained against it
    if backbone_path is None:
        save_bundle(backbone_bundle(model.config, weights),
                    run.dir / "backbone.mole")


def _train_summary(kind: str, result, out_path, extra: dict | None = None) -> dict:
    record = {
        "event": "trained", "model": kind,
        "steps_run": result.steps_run,
        "stopped_early": result.stopped_early,
        "out": str(out_path),
    }
    devs = [r.dev_loss for r in result.records if r.dev_loss is not None]
    if devs:
        record["final_dev_loss"] = devs[-1]
    if result.bundle is not None:
        record["bundle_digest"] = bundle_digest(result.bundle)
    record.update(extra or {})
    return record


def _make_handle(p: dict, model: Transformer, corpus) -> tuple[object, list]:
    """Evaluable handle from --bundle and/or --experts, plus input paths."""
    bundle_path = p.get("bundle")
    expert_paths = list(p.get("experts") or ())
    if bundle_path:
        b = _load_bundle_checked(bundle_path)
        name = Path(bundle_path).stem
        if b.kind == KIND_COMBINER:
            if not expert_paths:
                raise UsageError(
                    "a fusion checkpoint needs its expert bundles via --experts")
            experts = _load_experts(expert_paths, model, corpus)
            try:
                mole = restore_mole(b, model, experts)
            except ValueError as e:
                raise UsageError(str(e))
            return mole, [bundle_path] + expert_paths
        if b.kind == KIND_EXPERT:
            k = b.metadata.get("language_index")
            if k is None:
                raise UsageError(f"{bundle_path} lacks language_index metadata")
            _check_backbone_ref(b, model, str(bundle_path))
            return (ExpertSetHandle(name, model, {int(k): lift_adapters(b)}),
                    [bundle_path])
        if b.kind == KIND_STUDENT:
            _check_backbone_ref(b, model, str(bundle_path))
            return (SingleModelHandle(name, model, adapters=lift_adapters(b),
                                      route_classes=corpus.n_languages),
                    [bundle_path])
        raise UsageError(
            f"{bundle_path} is a backbone container, not an evaluable model")
    if expert_paths:
        experts = _load_experts(expert_paths, model, corpus,
                                require_full=False)
        by_language = {int(b.metadata["language_index"]): lift_adapters(b)
                       for b in experts}
        return ExpertSetHandle("experts", model, by_language), expert_paths
    raise UsageError("missing required parameter: bundle or experts")


def _check_split(p: dict) -> str:
    split = p["split"]
    if split not in SPLITS:
        raise UsageError(f"unknown split '{split}' (choose from {SPLITS})")
    return split


# ---------------------------------------------------------------------------
# parameter tables
# ---------------------------------------------------------------------------

def _common_params(cmd: str) -> tuple[Param, ...]:
    return (
        Param("run_dir", str, f"runs/{cmd}", "artifact directory"),
        Param("seed", int, 0, "master seed feeding every named substream"),
        Param("json_metrics", _bool, False,
              "print metrics records as JSON lines instead of text"),
    )


MODEL_PARAMS = (
    Param("backbone", _opt_str, None,
          "kind-0 backbone bundle; overrides the geometry flags"),
    Param("d_model", int, 64, "residual width"),
    Param("n_heads", int, 4, "attention heads"),
    Param("enc_layers", int, 6, "encoder blocks"),
    Param("dec_layers", int, 4, "decoder blocks"),
    Param("feature_dim", int, 16, "input frame feature size"),
    Param("vocab_size", int, 64, "token vocabulary size"),
    Param("max_decode_len", int, 32, "decoder position budget"),
    Param("max_source_len", int, 64, "encoder position budget"),
    Param("ff_mult", int, 4, "feed-forward width multiplier"),
    Param("model_languages", int, 4, "LID token slots in the vocabulary"),
)

CORPUS_IN = Param("corpus", str, "corpus", "corpus directory to read")


def _training_params(steps: int) -> tuple[Param, ...]:
    return (
        Param("steps", int, steps, "optimization step budget"),
        Param("frame_budget", int, 512, "frames per batch"),
        Param("peak_lr", float, 3e-3, "peak learning rate"),
        Param("warmup_frac", float, 0.05, "fraction of steps spent warming up"),
        Param("weight_decay", float, 1e-4, "decoupled weight decay"),
        Param("eval_every", int, 200, "steps between dev evaluations"),
        Param("patience", int, 5, "stalled dev evals before early stop"),
        Param("dev_utts", int, 16, "dev utterances per language for evals"),
        Param("track_dev_wer", _bool, False, "also decode dev WER at evals"),
    )


EVAL_CAP = Param("max_per_language", _opt_int, None,
                 "cap scored utterances per language")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_gen_data(p: dict, cmd: Command) -> int:
    if p.get("backbone"):
        f = Path(p["backbone"])
        if not f.is_file():
            raise UsageError(f"missing backbone bundle at {f}")
        config, _ = backbone_from_bundle(load_bundle(f))
    else:
        config = _model_config(p)
    n_languages = p["languages"]
    if n_languages > config.n_languages:
        raise UsageError(
            f"{n_languages} corpus languages exceed the model's "
            f"{config.n_languages} LID slots")
    sizes = p["train_sizes"]
    if len(sizes) not in (1, n_languages):
        raise UsageError(
            f"train_sizes needs 1 or {n_languages} entries, got {len(sizes)}")
    try:
        corpus_cfg = CorpusConfig.for_model(
            config, n_languages=n_languages, n_phonemes=p["phonemes"],
            subvocab_size=p["subvocab"], overlap=p["overlap"],
            sigma=p["sigma"], frames_per_phoneme=p["frames_per_phoneme"],
            min_phonemes=p["min_phonemes"], max_phonemes=p["max_phonemes"],
            train_sizes=sizes[0] if len(sizes) == 1 else sizes,
            dev_size=p["dev_size"], test_size=p["test_size"],
            emission_span=p["emission_span"],
            language_signature=p["language_signature"])
    except ValueError as e:
        raise UsageError(f"bad corpus settings: {e}")
    run = Run(cmd, p)
    corpus = build_corpus(corpus_cfg, p["seed"])
    out = Path(p["out"])
    save_corpus(corpus, out)
    total = sum(len(corpus.utterances(s)) for s in SPLITS)
    run.emit({"event": "corpus", "out": str(out), "languages": n_languages,
              "utterances": total, "content_hash": corpus.content_hash})
    return 0


def _cmd_train_expert(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, weights, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    language = _require(p, "lang")
    if not 0 <= language < corpus.n_languages:
        raise UsageError(
            f"language index {language} outside corpus range "
            f"0..{corpus.n_languages - 1}")
    cfg = _train_config(p, rank=p["rank"])
    run = Run(cmd, p)
    _save_backbone_artifact(run, model, weights, backbone_path)
    guarded = _corpus_files(p) + ([backbone_path] if backbone_path else [])
    pre = _input_digests(guarded)
    result = train_expert(corpus, language, model, cfg,
                          log_path=run.metrics_path)
    _check_inputs_unchanged(pre)
    out = Path(p["out"]) if p["out"] else run.dir / f"expert_{language}.mole"
    save_bundle(result.bundle, out)
    run.emit(_train_summary("expert", result, out, {"language": language}))
    return 0


def _cmd_train_baseline(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, weights, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    kind = p["sampling"]
    if kind not in (UNIFORM, WEIGHTED):
        raise UsageError(f"unknown sampling '{kind}' "
                         f"(choose from {UNIFORM}, {WEIGHTED})")
    weights_opt = p["weights"]
    if kind == WEIGHTED and weights_opt is None:
        # default to data-size-proportional sampling
        weights_opt = tuple(float(n) for n in corpus.config.train_per_language)
    try:
        sampling = SamplingStrategy(kind, weights_opt)
    except ValueError as e:
        raise UsageError(f"bad sampling settings: {e}")
    cfg = _train_config(p, rank=p["rank"])
    run = Run(cmd, p)
    _save_backbone_artifact(run, model, weights, backbone_path)
    guarded = _corpus_files(p) + ([backbone_path] if backbone_path else [])
    pre = _input_digests(guarded)
    result = train_multilingual_lora(corpus, model, cfg, sampling=sampling,
                                     log_path=run.metrics_path)
    _check_inputs_unchanged(pre)
    out = Path(p["out"]) if p["out"] else run.dir / "baseline.mole"
    save_bundle(result.bundle, out)
    run.emit(_train_summary("baseline", result, out, {"sampling": kind}))
    return 0


def _cmd_train_mole(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, weights, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    expert_paths = _require(p, "experts")
    experts = _load_experts(expert_paths, model, corpus)
    try:
        mole = MoleModel(model, experts, l1=p["l1"], seed=p["seed"])
    except ValueError as e:
        raise UsageError(str(e))
    cfg = _train_config(p, rank=experts[0].rank)
    run = Run(cmd, p)
    _save_backbone_artifact(run, model, weights, backbone_path)
    guarded = (_corpus_files(p) + list(expert_paths)
               + ([backbone_path] if backbone_path else []))
    pre = _input_digests(guarded)
    result = train_mole(mole, corpus, cfg, log_path=run.metrics_path)
    _check_inputs_unchanged(pre)
    out = Path(p["out"]) if p["out"] else run.dir / "mole.mole"
    save_bundle(result.bundle, out)
    accuracy = router_accuracy(mole, corpus, split="dev")
    run.emit(_train_summary("mole", result, out,
                            {"l1": p["l1"], "router_accuracy_dev": accuracy}))
    return 0


def _cmd_distill(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, weights, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    expert_paths = _require(p, "experts")
    experts = _load_experts(expert_paths, model, corpus)
    try:
        kd_cfg = KDConfig(alpha=p["alpha"], p=p["kd_p"],
                          student_rank=p["student_rank"],
                          layer_set=p["layer_set"])
        materialize_layer_set(model.config, kd_cfg.layer_set)
    except ValueError as e:
        raise UsageError(f"bad distillation settings: {e}")
    if kd_cfg.student_rank % experts[0].rank != 0:
        raise UsageError(
            f"student rank {kd_cfg.student_rank} must be a multiple of "
            f"the expert rank {experts[0].rank}")
    cfg = _train_config(p, rank=kd_cfg.student_rank)
    run = Run(cmd, p)
    _save_backbone_artifact(run, model, weights, backbone_path)
    guarded = (_corpus_files(p) + list(expert_paths)
               + ([backbone_path] if backbone_path else []))
    pre = _input_digests(guarded)
    result = train_student(corpus, model, experts, kd_cfg, cfg,
                           log_path=run.metrics_path)
    _check_inputs_unchanged(pre)
    out = Path(p["out"]) if p["out"] else run.dir / "student.mole"
    save_bundle(result.bundle, out)
    run.emit(_train_summary("student", result, out, {
        "kd_alpha": kd_cfg.alpha, "kd_p": kd_cfg.p,
        "student_rank": kd_cfg.student_rank,
        "layer_set": _format_layer_set(kd_cfg.layer_set)}))
    return 0


def _cmd_eval(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, _, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    split = _check_split(p)
    mode_arg = p["mode"]
    if mode_arg not in (AWARE, AGNOSTIC, "both"):
        raise UsageError(f"unknown mode '{mode_arg}' "
                         f"(choose from {AWARE}, {AGNOSTIC}, both)")
    modes = [AWARE, AGNOSTIC] if mode_arg == "both" else [mode_arg]
    handle, input_paths = _make_handle(p, model, corpus)
    run = Run(cmd, p)
    guarded = (_corpus_files(p) + list(input_paths)
               + ([backbone_path] if backbone_path else []))
    pre = _input_digests(guarded)
    reports = []
    for mode in modes:
        report, lid = evaluate(handle, corpus, split=split, mode=mode,
                               max_per_language=p["max_per_language"])
        reports.append(report)
        record = json.loads(report.to_json())
        record.update({"event": "wer", "split": split})
        run.emit(record)
        if lid is not None:
            lid_record = json.loads(lid.to_json())
            lid_record.update({"event": "lid", "model": report.model,
                               "split": split})
            run.emit(lid_record)
    _check_inputs_unchanged(pre)
    if not run.json_mode:
        print(render_wer_table(reports))
    return 0


def _cmd_sweep_l1(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, weights, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    split = _check_split(p)
    values = p["values"]
    for v in values:
        if not 1 <= v <= model.config.n_enc_layers:
            raise UsageError(
                f"l1 value {v} outside [1, {model.config.n_enc_layers}]")
    expert_paths = _require(p, "experts")
    experts = _load_experts(expert_paths, model, corpus)
    run = Run(cmd, p)
    _save_backbone_artifact(run, model, weights, backbone_path)
    guarded = (_corpus_files(p) + list(expert_paths)
               + ([backbone_path] if backbone_path else []))
    pre = _input_digests(guarded)
    cap = p["max_per_language"]
    for v in values:
        mole = MoleModel(model, experts, l1=v, seed=p["seed"])
        cfg = _train_config(p, rank=experts[0].rank)
        result = train_mole(mole, corpus, cfg)
        save_bundle(result.bundle, run.dir / f"mole_l1_{v}.mole")
        accuracy = router_accuracy(mole, corpus, split=split,
                                   max_per_language=cap)
        aware, _ = evaluate(mole, corpus, split=split, mode=AWARE,
                            max_per_language=cap)
        agnostic, _ = evaluate(mole, corpus, split=split, mode=AGNOSTIC,
                               max_per_language=cap)
        run.emit({"event": "sweep-l1", "l1": v,
                  "router_accuracy": accuracy,
                  "wer_aware": aware.macro_avg,
                  "wer_agnostic": agnostic.macro_avg,
                  "steps_run": result.steps_run})
    _check_inputs_unchanged(pre)
    return 0


def _kd_variant(name: str, p: dict, expert_rank: int) -> KDConfig:
    alpha, kd_p, rank = p["alpha"], p["kd_p"], p["student_rank"]
    if name == "full":
        return KDConfig(alpha=alpha, p=kd_p, student_rank=rank, layer_set=None)
    if name == "logits":
        return KDConfig(alpha=alpha, p=kd_p, student_rank=rank, layer_set=())
    if name == "half-rank":
        half = rank // 2
        if half < 1 or half % expert_rank != 0:
            raise UsageError(
                f"half rank {half} is not a positive multiple of the "
                f"expert rank {expert_rank}")
        return KDConfig(alpha=alpha, p=kd_p, student_rank=half, layer_set=None)
    raise UsageError(f"unknown variant '{name}' (choose from {KD_VARIANTS})")


def _cmd_sweep_kd(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, weights, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    split = _check_split(p)
    expert_paths = _require(p, "experts")
    experts = _load_experts(expert_paths, model, corpus)
    variants = p["variants"] or ()
    if not variants:
        raise UsageError("missing required parameter: variants")
    kd_cfgs = {name: _kd_variant(name, p, experts[0].rank)
               for name in variants}
    run = Run(cmd, p)
    _save_backbone_artifact(run, model, weights, backbone_path)
    guarded = (_corpus_files(p) + list(expert_paths)
               + ([backbone_path] if backbone_path else []))
    pre = _input_digests(guarded)
    cap = p["max_per_language"]
    for name in variants:
        kd_cfg = kd_cfgs[name]
        cfg = _train_config(p, rank=kd_cfg.student_rank)
        result = train_student(corpus, model, experts, kd_cfg, cfg)
        out = run.dir / f"student_{name}.mole"
        save_bundle(result.bundle, out)
        handle = SingleModelHandle(name, model,
                                   adapters=lift_adapters(result.bundle),
                                   route_classes=corpus.n_languages)
        aware, _ = evaluate(handle, corpus, split=split, mode=AWARE,
                            max_per_language=cap)
        agnostic, _ = evaluate(handle, corpus, split=split, mode=AGNOSTIC,
                               max_per_language=cap)
        run.emit({"event": "sweep-kd", "variant": name,
                  "student_rank": kd_cfg.student_rank,
                  "layer_set": _format_layer_set(kd_cfg.layer_set),
                  "wer_aware": aware.macro_avg,
                  "wer_agnostic": agnostic.macro_avg,
                  "steps_run": result.steps_run})
    _check_inputs_unchanged(pre)
    return 0


def _cmd_dump_embeddings(p: dict, cmd: Command) -> int:
    corpus = _load_corpus_checked(p)
    model, _, backbone_path = _build_model(p)
    _check_corpus_model(corpus, model.config)
    split = _check_split(p)
    layer = p["layer"]
    if layer is None:
        layer = model.config.n_enc_layers - 1
    if not 0 <= layer < model.config.n_enc_layers:
        raise UsageError(
            f"layer {layer} outside [0, {model.config.n_enc_layers})")
    handle, input_paths = _make_handle(p, model, corpus)
    run = Run(cmd, p)
    guarded = (_corpus_files(p) + list(input_paths)
               + ([backbone_path] if backbone_path else []))
    pre = _input_digests(guarded)
    out = Path(p["out"]) if p["out"] else run.dir / "embeddings.tsv"
    rows = dump_hidden(handle, corpus, split=split, layer_index=layer,
                       path=out)
    inter, intra = separability(out)
    _check_inputs_unchanged(pre)
    run.emit({"event": "embeddings", "rows": rows, "layer": layer,
              "split": split, "out": str(out),
              "inter_centroid_distance": inter,
              "intra_language_spread": intra})
    return 0


# ---------------------------------------------------------------------------
# registry and entry point
# ---------------------------------------------------------------------------

def _make_commands() -> dict[str, Command]:
    commands = [
        Command(
            "gen-data",
            "synthesize and save a seeded multilingual corpus",
            _common_params("gen-data") + MODEL_PARAMS + (
                Param("out", str, "corpus", "corpus output directory"),
                Param("languages", int, 3, "number of languages"),
                Param("phonemes", int, 12, "phoneme inventory per language"),
                Param("subvocab", int, 12, "token sub-vocabulary per language"),
                Param("overlap", float, 0.5,
                      "fraction of each sub-vocabulary shared across languages"),
                Param("sigma", float, 0.15, "acoustic noise level"),
                Param("frames_per_phoneme", int, 2, "frames per phoneme"),
                Param("min_phonemes", int, 3, "shortest utterance in phonemes"),
                Param("max_phonemes", int, 12, "longest utterance in phonemes"),
                Param("train_sizes", _csv_ints, (2000,),
                      "train utterances: one value for all languages or one per language"),
                Param("dev_size", int, 200, "dev utterances per language"),
                Param("test_size", int, 200, "test utterances per language"),
                Param("emission_span", _csv_ints, (1, 2),
                      "min,max tokens emitted per phoneme (1,1 = aligned)"),
                Param("language_signature", str, "templates",
                      "templates (acoustic identity) or transitions (phonotactic)"),
            ),
            _cmd_gen_data),
        Command(
            "train-expert",
            "train one language's adapter set against the frozen backbone",
            _common_params("train-expert") + MODEL_PARAMS + (CORPUS_IN,)
            + _training_params(3000) + (
                Param("lang", _opt_int, None, "language index to train"),
                Param("rank", int, 4, "adapter rank"),
                Param("out", _opt_str, None,
                      "bundle path (default <run_dir>/expert_<lang>.mole)"),
            ),
            _cmd_train_expert),
        Command(
            "train-baseline",
            "train the single multilingual adapter baseline",
            _common_params("train-baseline") + MODEL_PARAMS + (CORPUS_IN,)
            + _training_params(6000) + (
                Param("rank", int, 16, "adapter rank"),
                Param("sampling", str, UNIFORM,
                      f"language sampling: {UNIFORM} or {WEIGHTED}"),
                Param("weights", _opt_csv_floats, None,
                      "per-language sampling weights (weighted mode)"),
                Param("out", _opt_str, None,
                      "bundle path (default <run_dir>/baseline.mole)"),
            ),
            _cmd_train_baseline),
        Command(
            "train-mole",
            "train softmax fusion combiners and the language router "
            "over frozen experts",
            _common_params("train-mole") + MODEL_PARAMS + (CORPUS_IN,)
            + _training_params(2000) + (
                Param("experts", _opt_csv_strs, None,
                      "comma-separated expert bundle paths"),
                Param("l1", int, 4, "encoder layers fused with shared-merged "
                      "adapters before per-expert streams split"),
                Param("out", _opt_str, None,
                      "bundle path (default <run_dir>/mole.mole)"),
            ),
            _cmd_train_mole),
        Command(
            "distill",
            "distill the experts into one multilingual student adapter set",
            _common_params("distill") + MODEL_PARAMS + (CORPUS_IN,)
            + _training_params(6000) + (
                Param("experts", _opt_csv_strs, None,
                      "comma-separated expert bundle paths"),
                Param("student_rank", int, 16, "student adapter rank"),
                Param("alpha", float, 1.0, "hidden-alignment loss weight"),
                Param("kd_p", float, 0.5,
                      "per-layer teacher interpolation probability"),
                Param("layer_set", _parse_layer_set, None,
                      "'all', 'none', or comma-separated tags like enc.0,dec.2",
                      fmt=_format_layer_set),
                Param("out", _opt_str, None,
                      "bundle path (default <run_dir>/student.mole)"),
            ),
            _cmd_distill),
        Command(
            "eval",
            "decode a split and report WER (and LID when inferring language)",
            _common_params("eval") + MODEL_PARAMS + (
                CORPUS_IN,
                Param("bundle", _opt_str, None,
                      "bundle to evaluate (expert, student, or fusion checkpoint)"),
                Param("experts", _opt_csv_strs, None,
                      "expert bundle paths (expert-set eval, or fusion restore)"),
                Param("mode", str, AWARE, f"{AWARE}, {AGNOSTIC}, or both"),
                Param("split", str, "test", "corpus split to score"),
                EVAL_CAP,
            ),
            _cmd_eval),
        Command(
            "sweep-l1",
            "train fusion models across shared-layer depths and record "
            "router accuracy and WER per depth",
            _common_params("sweep-l1") + MODEL_PARAMS + (CORPUS_IN,)
            + _training_params(2000) + (
                Param("experts", _opt_csv_strs, None,
                      "comma-separated expert bundle paths"),
                Param("values", _csv_ints, (2, 3, 4, 5, 6),
                      "shared-layer depths to sweep"),
                Param("split", str, "test", "corpus split to score"),
                EVAL_CAP,
            ),
            _cmd_sweep_l1),
        Command(
            "sweep-kd",
            "train student variants (full, logits-only, half-rank) and "
            "record WER per variant",
            _common_params("sweep-kd") + MODEL_PARAMS + (CORPUS_IN,)
            + _training_params(6000) + (
                Param("experts", _opt_csv_strs, None,
                      "comma-separated expert bundle paths"),
                Param("variants", _opt_csv_strs, KD_VARIANTS,
                      f"subset of {','.join(KD_VARIANTS)}"),
                Param("student_rank", int, 16, "full student adapter rank"),
                Param("alpha", float, 1.0, "hidden-alignment loss weight"),
                Param("kd_p", float, 0.5,
                      "per-layer teacher interpolation probability"),
                Param("split", str, "test", "corpus split to score"),
                EVAL_CAP,
            ),
            _cmd_sweep_kd),
        Command(
            "dump-embeddings",
            "dump pooled encoder states to TSV and report language separability",
            _common_params("dump-embeddings") + MODEL_PARAMS + (
                CORPUS_IN,
                Param("bundle", _opt_str, None, "bundle providing the adapters"),
                Param("experts", _opt_csv_strs, None,
                      "expert bundle paths (per-language adapters)"),
                Param("layer", _opt_int, None,
                      "encoder layer to pool (default: last)"),
                Param("split", str, "dev", "corpus split to embed"),
                Param("out", _opt_str, None,
                      "TSV path (default <run_dir>/embeddings.tsv)"),
            ),
            _cmd_dump_embeddings),
    ]
    return {c.name: c for c in commands}


COMMANDS = _make_commands()


def build_parser() -> _Parser:
    parser = _Parser(prog="mole-asr",
                     description="multilingual adapter pipeline driver")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)
    for cmd in COMMANDS.values():
        s = sub.add_parser(cmd.name, help=cmd.help, description=cmd.help)
        s.add_argument("--config", default=None, metavar="FILE",
                       help="flat key=value parameter file")
        for q in cmd.params:
            flag = "--" + q.name.replace("_", "-")
            if q.parse is _bool:
                s.add_argument(flag, dest=q.name, action="store_true",
                               default=argparse.SUPPRESS,
                               help=f"{q.help} (default {q.format(q.default)})")
                s.add_argument("--no-" + q.name.replace("_", "-"),
                               dest=q.name, action="store_false",
                               default=argparse.SUPPRESS,
                               help=argparse.SUPPRESS)
            else:
                s.add_argument(flag, dest=q.name, type=q.parse,
                               default=argparse.SUPPRESS, metavar="V",
                               help=f"{q.help} "
                                    f"(default {q.format(q.default) or repr('')})")
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command "
                             f"(choose from {', '.join(COMMANDS)})")
        cmd = COMMANDS[args.command]
        params = _resolve_params(cmd, args)
        return cmd.run(params, cmd)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - boundary: report and exit nonzero
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
