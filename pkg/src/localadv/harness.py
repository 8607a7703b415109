"""Experiment orchestration: the attack-method matrix, budgets, persistence.

Every named method is one cell of (mask source) x (start point) x (engine):

    GGE        ones      clean         gradient estimation
    MI-GE      salience  clean         gradient estimation
    IAE&MI-GE  salience  preperturbed  gradient estimation
    GRS        ones      clean         random search, fixed white
    SBLS       external  clean         random search, fixed white
    MI-RS      salience  clean         random search, additive
    IAE&MI-RS  salience  preperturbed  random search, additive
    NMI-RS     inverted  clean         random search, additive
    R<p>-RS    random p  clean         random search, additive

Each attack runs against a fresh query-counted oracle wrapped in a hard
budget guard; the reported query count must equal the oracle's counter, which
is asserted on every run.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attacks import ge_attack, rs_attack, rs_attack_fixed_value
from .metrics import lp_distances, psnr
from .models import ToyConvNet, ToyReferenceModel, load_model, make_black_box
from .oracle import Oracle, Prediction
from .preattack import multi_reference_preprocess, preprocess, union_mask
from .salience import invert_mask, random_mask, salience_mask
from .serialize import append_jsonl, load_corpus, read_jsonl, save_image_npz
from .types import (
    AttackResult,
    BinaryMask,
    GEConfig,
    ImageTensor,
    PHASE_FAILED,
    PreprocessConfig,
    RSConfig,
)

log = logging.getLogger(__name__)

MASK_SALIENCE = "salience"
MASK_INVERTED = "inverted"
MASK_RANDOM = "random"
MASK_ONES = "ones"
MASK_EXTERNAL = "external"

START_CLEAN = "clean"
START_PREPERTURBED = "preperturbed"

ENGINE_GE = "ge"
ENGINE_RS = "rs"
ENGINE_RS_FIXED = "rs_fixed"


@dataclass(frozen=True)
class MethodSpec:
    """One cell of the attack matrix."""

    name: str
    mask_source: str
    start: str
    engine: str
    proportion: Optional[float] = None


_FIXED_METHODS = {
    "GGE": MethodSpec("GGE", MASK_ONES, START_CLEAN, ENGINE_GE),
    "MI-GE": MethodSpec("MI-GE", MASK_SALIENCE, START_CLEAN, ENGINE_GE),
    "IAE&MI-GE": MethodSpec("IAE&MI-GE", MASK_SALIENCE, START_PREPERTURBED, ENGINE_GE),
    "GRS": MethodSpec("GRS", MASK_ONES, START_CLEAN, ENGINE_RS_FIXED),
    "SBLS": MethodSpec("SBLS", MASK_EXTERNAL, START_CLEAN, ENGINE_RS_FIXED),
    "MI-RS": MethodSpec("MI-RS", MASK_SALIENCE, START_CLEAN, ENGINE_RS),
    "IAE&MI-RS": MethodSpec("IAE&MI-RS", MASK_SALIENCE, START_PREPERTURBED, ENGINE_RS),
    "NMI-RS": MethodSpec("NMI-RS", MASK_INVERTED, START_CLEAN, ENGINE_RS),
}

_R_STAR = re.compile(r"^R(0?\.\d+|1(?:\.0+)?)-RS$")

METHOD_NAMES = tuple(_FIXED_METHODS) + ("R<p>-RS",)


def parse_method(name: str) -> MethodSpec:
    """Resolve a method name, including the R<p>-RS family (0 < p <= 1)."""
    if name in _FIXED_METHODS:
        return _FIXED_METHODS[name]
    m = _R_STAR.match(name)
    if m:
        return MethodSpec(name, MASK_RANDOM, START_CLEAN, ENGINE_RS, proportion=float(m.group(1)))
    raise ValueError(f"unknown method {name!r}; known: {', '.join(METHOD_NAMES)}")


class QueryBudgetExceeded(RuntimeError):
    """Raised by the budget guard before a query that would pass the cap."""


class BudgetedOracle:
    """Hard per-attack query cap around an oracle; counts from construction."""

    def __init__(self, inner: Oracle, budget: int):
        if budget < 1:
            raise ValueError("query budget must be at least 1")
        self._inner = inner
        self._budget = budget
        self._start = inner.query_count

    @property
    def query_count(self) -> int:
        return self._inner.query_count

    @property
    def used(self) -> int:
        return self._inner.query_count - self._start

    def query(self, x: ImageTensor) -> Prediction:
        if self.used >= self._budget:
            raise QueryBudgetExceeded(f"attack exceeded its {self._budget}-query budget")
        return self._inner.query(x)


@dataclass(frozen=True)
class AttackConfigs:
    """Engine and preprocessing settings for one method run."""

    preprocess: PreprocessConfig = PreprocessConfig()
    ge: GEConfig = GEConfig()
    rs: RSConfig = RSConfig()
    fixed_value: Tuple[float, ...] = (255.0, 255.0, 255.0)

    def with_overrides(self, overrides: Optional[dict]) -> "AttackConfigs":
        if not overrides:
            return self
        cfg = self
        if "preprocess" in overrides:
            cfg = replace(cfg, preprocess=replace(cfg.preprocess, **overrides["preprocess"]))
        if "ge" in overrides:
            cfg = replace(cfg, ge=replace(cfg.ge, **overrides["ge"]))
        if "rs" in overrides:
            cfg = replace(cfg, rs=replace(cfg.rs, **overrides["rs"]))
        if "fixed_value" in overrides:
            cfg = replace(cfg, fixed_value=tuple(overrides["fixed_value"]))
        return cfg


def _build_mask(
    method: MethodSpec,
    x: ImageTensor,
    y: int,
    refs: Sequence[ToyReferenceModel],
    mask_seed: int,
    external_mask: Optional[BinaryMask],
) -> BinaryMask:
    if method.mask_source == MASK_ONES:
        return BinaryMask(np.ones(x.shape[:2]))
    if method.mask_source == MASK_RANDOM:
        return random_mask(x.shape[:2], method.proportion, mask_seed)
    if method.mask_source == MASK_EXTERNAL:
        if external_mask is None:
            raise ValueError(f"method {method.name} needs an externally supplied mask")
        return external_mask
    salience = (
        salience_mask(refs[0], x, y)
        if len(refs) == 1
        else union_mask([salience_mask(r, x, y) for r in refs])
    )
    if method.mask_source == MASK_SALIENCE:
        return salience
    if method.mask_source == MASK_INVERTED:
        return invert_mask(salience)
    raise ValueError(f"unknown mask source {method.mask_source!r}")


def _combined(pre_queries: int, engine_result: AttackResult) -> AttackResult:
    return AttackResult(
        success=engine_result.success,
        final_image=engine_result.final_image,
        noq=pre_queries + engine_result.noq,
        final_label=engine_result.final_label,
        final_prob=engine_result.final_prob,
        phase=engine_result.phase,
    )


def run_single_attack(
    method: MethodSpec,
    x: ImageTensor,
    y: int,
    target_net: ToyConvNet,
    refs: Sequence[ToyReferenceModel],
    configs: AttackConfigs,
    seed: int,
    budget: int,
    external_mask: Optional[BinaryMask] = None,
) -> Tuple[AttackResult, Optional[BinaryMask]]:
    """One (example, method) cell; returns the result and the mask it used.

    The result's noq always equals the oracle counter delta; a budget abort
    yields a failed result whose noq is whatever the attack had spent.
    """
    needs_ref = method.mask_source in (MASK_SALIENCE, MASK_INVERTED) or (
        method.start == START_PREPERTURBED
    )
    if needs_ref and not refs:
        raise ValueError(f"method {method.name} needs at least one reference model")
    if refs and tuple(refs[0].input_shape[:2]) != x.shape[:2]:
        log.warning(
            "reference input size %s differs from image size %s; resizing costs quality",
            refs[0].input_shape[:2],
            x.shape[:2],
        )
    ss = np.random.SeedSequence(seed)
    mask_seed, engine_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))

    oracle = make_black_box(target_net)
    guard = BudgetedOracle(oracle, budget)
    bm: Optional[BinaryMask] = None
    try:
        if method.start == START_PREPERTURBED:
            if len(refs) == 1:
                x_start, bm, early = preprocess(x, y, guard, refs[0], configs.preprocess)
            else:
                x_start, bm, early = multi_reference_preprocess(
                    x, y, guard, refs, configs.preprocess
                )
            if early is not None:
                result = early
            else:
                engine_result = _run_engine(method, x_start, y, guard, bm, configs, engine_seed)
                result = _combined(configs.preprocess.T1, engine_result)
        else:
            bm = _build_mask(method, x, y, refs, mask_seed, external_mask)
            result = _run_engine(method, x, y, guard, bm, configs, engine_seed)
    except QueryBudgetExceeded:
        result = AttackResult(
            success=False,
            final_image=None,
            noq=guard.used,
            final_label=None,
            final_prob=None,
            phase=PHASE_FAILED,
        )
    if result.noq != guard.used:
        raise RuntimeError(
            f"query accounting mismatch for {method.name}: "
            f"reported {result.noq}, counter says {guard.used}"
        )
    return result, bm


def _run_engine(
    method: MethodSpec,
    x_start: ImageTensor,
    y: int,
    oracle: Oracle,
    bm: BinaryMask,
    configs: AttackConfigs,
    seed: int,
) -> AttackResult:
    if method.engine == ENGINE_GE:
        return ge_attack(x_start, y, oracle, bm, configs.ge, seed)
    if method.engine == ENGINE_RS:
        return rs_attack(x_start, y, oracle, bm, configs.rs, seed)
    if method.engine == ENGINE_RS_FIXED:
        return rs_attack_fixed_value(
            x_start, y, oracle, bm, configs.rs, configs.fixed_value, seed
        )
    raise ValueError(f"unknown engine {method.engine!r}")


# -- experiment specs -----------------------------------------------------------

@dataclass
class ExperimentSpec:
    """Everything one experiment needs: data, models, methods, seeds, budget."""

    corpus: str
    target_model: str
    reference_models: List[str]
    methods: List[str]
    master_seed: int = 0
    query_budget: int = 5000
    configs: AttackConfigs = field(default_factory=AttackConfigs)
    method_overrides: Dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.query_budget < 1:
            raise ValueError("query budget must be at least 1")
        for name in self.methods:
            parse_method(name)

    @classmethod
    def from_file(cls, path) -> "ExperimentSpec":
        with open(path) as f:
            raw = json.load(f)
        base = os.path.dirname(os.path.abspath(path))

        def resolve(p: str) -> str:
            return p if os.path.isabs(p) else os.path.join(base, p)

        configs = AttackConfigs(
            preprocess=PreprocessConfig(**raw.get("preprocess", {})),
            ge=GEConfig(**raw.get("ge", {})),
            rs=RSConfig(**raw.get("rs", {})),
            fixed_value=tuple(raw.get("fixed_value", (255.0, 255.0, 255.0))),
        )
        return cls(
            corpus=resolve(raw["corpus"]),
            target_model=resolve(raw["target_model"]),
            reference_models=[resolve(p) for p in raw.get("reference_models", [])],
            methods=list(raw["methods"]),
            master_seed=int(raw.get("master_seed", 0)),
            query_budget=int(raw.get("query_budget", 5000)),
            configs=configs,
            method_overrides=dict(raw.get("method_overrides", {})),
        )

    def to_file(self, path) -> None:
        raw = {
            "corpus": self.corpus,
            "target_model": self.target_model,
            "reference_models": list(self.reference_models),
            "methods": list(self.methods),
            "master_seed": self.master_seed,
            "query_budget": self.query_budget,
            "preprocess": vars(self.configs.preprocess).copy(),
            "ge": vars(self.configs.ge).copy(),
            "rs": vars(self.configs.rs).copy(),
            "fixed_value": list(self.configs.fixed_value),
            "method_overrides": self.method_overrides,
        }
        with open(path, "w") as f:
            json.dump(raw, f, indent=2)


@dataclass
class RunRecord:
    """One (example, method) outcome plus its per-attack quality metrics."""

    example_id: str
    method: str
    seed: int
    success: bool
    noq: int
    phase: str
    final_label: Optional[int]
    final_prob: Optional[float]
    psnr_db: Optional[float]
    l0: Optional[int]
    l2: Optional[float]
    linf: Optional[float]
    wall_time_s: float
    adv_file: Optional[str]

    def to_dict(self) -> dict:
        d = vars(self).copy()
        if d["psnr_db"] is not None and not np.isfinite(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        if d.get("psnr_db") == "inf":
            d["psnr_db"] = float("inf")
        return cls(**d)


def method_file_tag(method: str) -> str:
    """Filesystem-safe method tag (& is inconvenient in shells)."""
    return method.replace("&", "+")


def attack_seed(master_seed: int, example_index: int, method: str) -> int:
    """Stable per-cell seed: independent of which other methods run."""
    ss = np.random.SeedSequence([master_seed, example_index, zlib.crc32(method.encode())])
    return int(ss.generate_state(1)[0])


def run_experiment(spec: ExperimentSpec, out_dir: Optional[str] = None) -> List[RunRecord]:
    """Run the full (example x method) grid in canonical order.

    Canonical order is example id, then method name. With ``out_dir`` set,
    appends one JSON line per record to records.jsonl and stores each final
    image under adv/.
    """
    corpus, ids = load_corpus(spec.corpus)
    target_net = load_model(spec.target_model)
    refs = [ToyReferenceModel(load_model(p)) for p in spec.reference_models]
    methods = sorted(spec.methods)

    adv_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        adv_dir = os.path.join(out_dir, "adv")
        os.makedirs(adv_dir, exist_ok=True)
        spec.to_file(os.path.join(out_dir, "spec.json"))

    records: List[RunRecord] = []
    for i, (x, y) in enumerate(zip(corpus.images, corpus.labels)):
        region = BinaryMask(corpus.region_mask(i))
        for name in methods:
            method = parse_method(name)
            configs = spec.configs.with_overrides(spec.method_overrides.get(name))
            seed = attack_seed(spec.master_seed, i, name)
            started = time.perf_counter()
            result, _ = run_single_attack(
                method,
                x,
                y,
                target_net,
                refs,
                configs,
                seed,
                spec.query_budget,
                external_mask=region,
            )
            elapsed = time.perf_counter() - started

            adv_file = None
            if result.final_image is not None:
                qual_psnr = psnr(x, result.final_image)
                lp = lp_distances(x, result.final_image)
                if adv_dir is not None:
                    adv_file = os.path.join(
                        "adv", f"{ids[i]}__{method_file_tag(name)}.npz"
                    )
                    save_image_npz(result.final_image, os.path.join(out_dir, adv_file))
                record = RunRecord(
                    example_id=ids[i],
                    method=name,
                    seed=seed,
                    success=result.success,
                    noq=result.noq,
                    phase=result.phase,
                    final_label=result.final_label,
                    final_prob=result.final_prob,
                    psnr_db=qual_psnr,
                    l0=lp.l0,
                    l2=lp.l2,
                    linf=lp.linf,
                    wall_time_s=elapsed,
                    adv_file=adv_file,
                )
            else:
                record = RunRecord(
                    example_id=ids[i],
                    method=name,
                    seed=seed,
                    success=False,
                    noq=result.noq,
                    phase=result.phase,
                    final_label=None,
                    final_prob=None,
                    psnr_db=None,
                    l0=None,
                    l2=None,
                    linf=None,
                    wall_time_s=elapsed,
                    adv_file=None,
                )
            records.append(record)
            if out_dir is not None:
                append_jsonl(os.path.join(out_dir, "records.jsonl"), [record.to_dict()])
    return records


def read_records(path) -> List[RunRecord]:
    return [RunRecord.from_dict(d) for d in read_jsonl(path)]
