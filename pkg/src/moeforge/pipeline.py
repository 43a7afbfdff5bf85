"""End-to-end orchestration: corpora, specialists, fusion, routing, report.

Every random draw is seeded from one master seed through fixed
(stage, item) derivation, so a pipeline run is a pure function of its
configuration and reruns write byte-identical artifacts. The ablation
flags swap in the naive construction piecewise; removing alignment also
reverts the backbone to plain averaging, because a permutation is
function-preserving and permutation-only ablation would change nothing.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .alignment import align_expert, result_to_json_dict, save_permutations
from .analysis import (
    CkaReport,
    expert_cka_study,
    expert_usage,
    perplexity,
    reports_to_csv,
    reports_to_json,
    routing_trace_for,
)
from .checkpoint_io import save_checkpoint
from .corpus import (
    DOMAINS,
    VOCAB_SIZE,
    gen_corpus,
    sample_calibration,
    shared_vocab,
    write_calibration,
    write_corpus,
)
from .fusion import MergeRecipe, build_backbone
from .model import DESK_CONFIG, DenseCheckpoint, TransformerConfig
from .moe import RoutingConfig, assemble_moe
from .training import TrainConfig, finetune_dense, pretrain_dense, train_router, write_metrics_csv

# seed-derivation stage tags
STAGE_CORPUS = 0
STAGE_PRETRAIN = 1
STAGE_CALIB = 2
STAGE_ASSEMBLY = 3
STAGE_ROUTER = 4

WORKER_THREADS = 1  # recorded in reports; the pipeline is single-threaded

# STAGE_PRETRAIN seed items.  Specialists use items 0..3; the foundation
# pretrains and the code continuation use high items so adding domains
# never reshuffles existing draws.
FOUNDATION_ITEM = 100
FOUNDATION_ALT_ITEM = 102
BRANCH_ITEM = 103

# Foundation ancestry for the four specialists: general and math descend
# from the shared foundation, code from a continued-training branch of it,
# science from an independently pretrained one.  Specialist passes then
# touch only FFN tensors, so siblings keep their foundation's attention
# geometry exactly; the sources are disparate where the checkpoints'
# histories diverge and compatible where they are shared, which is what
# makes both weight-space fusion and the similarity study meaningful.
ANCESTRY = ("foundation", "foundation", "foundation_code", "foundation_alt")


def derive_seed(master: int, stage: int, item: int) -> int:
    """Stable per-stage seed from the master seed."""
    ss = np.random.SeedSequence((master, stage, item))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class PipelineRunConfig:
    out_dir: str
    seed: int = 0
    n_experts: int = 4
    anchor_index: int = 0
    config: TransformerConfig = DESK_CONFIG
    n_seq_train: int = 64
    n_seq_eval: int = 16
    seq_len: int = 128
    calib_fraction: float = 0.25
    pretrain_lr: float = 1e-3
    foundation_epochs: int = 12
    branch_epochs: int = 2
    specialize_epochs: int = 2
    router_train: TrainConfig = field(default_factory=TrainConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    no_alignment: bool = False
    naive_attention: bool = False
    naive_embedding: bool = False
    biased_calibration: bool = False
    normalize_activations: bool = False
    backend: str = "auto"
    cka_layers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not 1 <= self.n_experts <= len(DOMAINS):
            raise ValueError(f"n_experts must be in 1..{len(DOMAINS)}")
        if not 0 <= self.anchor_index < self.n_experts:
            raise ValueError("anchor_index out of range")
        if self.config.vocab_size != VOCAB_SIZE:
            raise ValueError("pipeline corpora need the shared vocabulary size")

    def domains(self) -> tuple[str, ...]:
        return DOMAINS[: self.n_experts]

    def recipe(self) -> MergeRecipe:
        n = self.n_experts
        attention = "linear" if (self.no_alignment or self.naive_attention) else "slerp"
        embedding = "linear" if (self.no_alignment or self.naive_embedding) else "selective"
        return MergeRecipe(
            weights=tuple(1.0 / n for _ in range(n)),
            anchor_index=self.anchor_index,
            attention_strategy=attention,
            embedding_strategy=embedding,
        )

    def variant_name(self) -> str:
        flags = []
        if self.no_alignment:
            flags.append("no_alignment")
        if self.naive_attention:
            flags.append("naive_attention")
        if self.naive_embedding:
            flags.append("naive_embedding")
        if self.biased_calibration:
            flags.append("biased_calibration")
        return "+".join(flags) if flags else "aligned"


def _json_dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def run_pipeline(cfg: PipelineRunConfig) -> dict:
    """Execute all stages into cfg.out_dir and return the report dict."""
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    domains = cfg.domains()
    vocab = shared_vocab()

    # corpora: training and held-out evaluation sets per domain
    corpora_dir = os.path.join(out, "corpora")
    os.makedirs(corpora_dir, exist_ok=True)
    seed_train = derive_seed(cfg.seed, STAGE_CORPUS, 0)
    seed_eval = derive_seed(cfg.seed, STAGE_CORPUS, 1)
    train_corpora = {d: gen_corpus(d, seed_train, cfg.n_seq_train, cfg.seq_len) for d in domains}
    eval_corpora = {d: gen_corpus(d, seed_eval, cfg.n_seq_eval, cfg.seq_len) for d in domains}
    for d in domains:
        write_corpus(train_corpora[d], os.path.join(corpora_dir, f"{d}.bin"))
        write_corpus(eval_corpora[d], os.path.join(corpora_dir, f"{d}_eval.bin"))

    # stage 0: foundations on the mixed corpus, then one specialist per domain
    models_dir = os.path.join(out, "models")
    os.makedirs(models_dir, exist_ok=True)
    mixed_train = [s for d in domains for s in train_corpora[d]]
    found_cfg = TrainConfig(
        learning_rate=cfg.pretrain_lr,
        epochs=cfg.foundation_epochs,
        max_seq_len=cfg.seq_len,
        trainable="all",
    )
    branch_cfg = dataclasses.replace(found_cfg, epochs=cfg.branch_epochs)
    spec_cfg = dataclasses.replace(
        found_cfg, epochs=cfg.specialize_epochs, trainable="ffn_only"
    )

    foundations: dict[str, DenseCheckpoint] = {}
    ancestry = ANCESTRY[: cfg.n_experts]
    foundations["foundation"], flog = pretrain_dense(
        cfg.config,
        mixed_train,
        found_cfg,
        seed=derive_seed(cfg.seed, STAGE_PRETRAIN, FOUNDATION_ITEM),
        model_id="foundation",
        vocab=vocab,
    )
    write_metrics_csv(flog, os.path.join(models_dir, "foundation_metrics.csv"))
    if "foundation_code" in ancestry:
        foundations["foundation_code"], flog = finetune_dense(
            foundations["foundation"],
            train_corpora["code"],
            branch_cfg,
            seed=derive_seed(cfg.seed, STAGE_PRETRAIN, BRANCH_ITEM),
            model_id="foundation_code",
        )
        write_metrics_csv(flog, os.path.join(models_dir, "foundation_code_metrics.csv"))
    if "foundation_alt" in ancestry:
        foundations["foundation_alt"], flog = pretrain_dense(
            cfg.config,
            mixed_train,
            found_cfg,
            seed=derive_seed(cfg.seed, STAGE_PRETRAIN, FOUNDATION_ALT_ITEM),
            model_id="foundation_alt",
            vocab=vocab,
        )
        write_metrics_csv(flog, os.path.join(models_dir, "foundation_alt_metrics.csv"))
    for name, ck in foundations.items():
        save_checkpoint(ck, os.path.join(models_dir, name))

    models = []
    for i, d in enumerate(domains):
        ck, log = finetune_dense(
            foundations[ancestry[i]],
            train_corpora[d],
            spec_cfg,
            seed=derive_seed(cfg.seed, STAGE_PRETRAIN, i),
            model_id=d,
        )
        models.append(ck)
        save_checkpoint(ck, os.path.join(models_dir, d))
        write_metrics_csv(log, os.path.join(models_dir, f"{d}_metrics.csv"))

    # calibration draw, shared by alignment and router training
    calib = sample_calibration(
        [train_corpora[d] for d in domains],
        cfg.calib_fraction,
        derive_seed(cfg.seed, STAGE_CALIB, 0),
        biased=cfg.biased_calibration,
    )
    write_calibration(calib, os.path.join(out, "calibration.bin"))

    # stage 1: fused backbone + expert alignment
    recipe = cfg.recipe()
    backbone = build_backbone(models, recipe)
    save_checkpoint(backbone, os.path.join(out, "backbone"))

    anchor = models[cfg.anchor_index]
    expert_ffns = []
    alignment_report = {}
    perm_dir = os.path.join(out, "permutations")
    for i, model in enumerate(models):
        if cfg.no_alignment or i == cfg.anchor_index:
            expert_ffns.append([l.ffn for l in model.layers])
            continue
        r = align_expert(
            anchor,
            model,
            calib.sequences,
            backend=cfg.backend,
            normalize=cfg.normalize_activations,
        )
        expert_ffns.append(r.aligned)
        os.makedirs(perm_dir, exist_ok=True)
        save_permutations(os.path.join(perm_dir, f"{model.model_id}.json"), r)
        alignment_report[model.model_id] = result_to_json_dict(r)["costs"]

    seed_router = derive_seed(cfg.seed, STAGE_ASSEMBLY, 0)
    moe = assemble_moe(
        backbone,
        expert_ffns,
        seed=seed_router,
        routing=cfg.routing,
        model_ids=[m.model_id for m in models],
        extra_provenance={"variant": cfg.variant_name()},
    )
    save_checkpoint(moe, os.path.join(out, "moe"))

    # stage 2: router-only training on the calibration set
    router_cfg = dataclasses.replace(
        cfg.router_train,
        seed=derive_seed(cfg.seed, STAGE_ROUTER, 0),
        trainable="router_only",
        max_seq_len=cfg.seq_len,
    )
    trained, log = train_router(moe, calib.sequences, router_cfg)
    save_checkpoint(trained, os.path.join(out, "moe_trained"))
    write_metrics_csv(log, os.path.join(out, "metrics.csv"))

    # evaluation: perplexity per domain and mixed, usage, CKA study
    ppl = {d: perplexity(trained, eval_corpora[d]) for d in domains}
    mixed = [s for d in domains for s in eval_corpora[d]]
    ppl["mixed"] = perplexity(trained, mixed)
    trace = routing_trace_for(trained, mixed)
    usage = expert_usage(trace)

    cka_reports: list[CkaReport] = []
    cka_note = None
    if cfg.n_experts >= 2:
        naive_recipe = MergeRecipe(
            weights=recipe.weights,
            anchor_index=cfg.anchor_index,
            attention_strategy="linear",
            embedding_strategy="linear",
        )
        naive_moe = assemble_moe(
            build_backbone(models, naive_recipe),
            [[l.ffn for l in m.layers] for m in models],
            seed=seed_router,
            routing=cfg.routing,
            model_ids=[m.model_id for m in models],
        )
        layers = cfg.cka_layers
        if cfg.no_alignment:
            # the ablation has no aligned construction to probe
            from .analysis import dense_hidden_activations, make_report, moe_expert_activations

            if layers is None:
                layers = (cfg.config.n_layers - 1,)
            original = dense_hidden_activations(models, calib.sequences, layers)
            naive_acts = moe_expert_activations(naive_moe, calib.sequences, layers)
            for l in layers:
                cka_reports.append(make_report("original", l, original[l]))
                cka_reports.append(make_report("naive_merge", l, naive_acts[l]))
            cka_note = "aligned_merge omitted: run has no alignment stage"
        else:
            cka_reports = expert_cka_study(models, naive_moe, moe, calib.sequences, layers)
        reports_to_json(cka_reports, os.path.join(out, "cka.json"))
        reports_to_csv(cka_reports, os.path.join(out, "cka.csv"))
    else:
        cka_note = "skipped: single expert"

    report = {
        "variant": cfg.variant_name(),
        "flags": {
            "no_alignment": cfg.no_alignment,
            "naive_attention": cfg.naive_attention,
            "naive_embedding": cfg.naive_embedding,
            "biased_calibration": cfg.biased_calibration,
            "normalize_activations": cfg.normalize_activations,
        },
        "seed": cfg.seed,
        "worker_threads": WORKER_THREADS,
        "n_experts": cfg.n_experts,
        "anchor_index": cfg.anchor_index,
        "domains": list(domains),
        "config": cfg.config.to_dict(),
        "recipe": recipe.to_dict(),
        "routing": cfg.routing.to_dict(),
        "router_train": router_cfg.to_dict(),
        "stage0": {
            "learning_rate": cfg.pretrain_lr,
            "foundation_epochs": cfg.foundation_epochs,
            "branch_epochs": cfg.branch_epochs,
            "specialize_epochs": cfg.specialize_epochs,
            "ancestry": {d: ancestry[i] for i, d in enumerate(domains)},
        },
        "corpus": {
            "n_seq_train": cfg.n_seq_train,
            "n_seq_eval": cfg.n_seq_eval,
            "seq_len": cfg.seq_len,
            "calib_fraction": cfg.calib_fraction,
            "calib_size": len(calib.sequences),
            "biased": calib.biased,
        },
        "alignment_costs": alignment_report,
        "perplexity": ppl,
        "expert_usage": usage.to_dict(),
        "router_metrics": {
            "epochs": router_cfg.epochs,
            "lm_loss_by_epoch": log.epoch_mean("lm_loss"),
            "bal_loss_by_epoch": log.epoch_mean("bal_loss"),
        },
        "cka": {
            "note": cka_note,
            "mean_offdiagonal": {
                s: [r.mean_offdiagonal for r in cka_reports if r.scenario == s]
                for s in ("original", "naive_merge", "aligned_merge")
            },
        },
    }
    _json_dump(report, os.path.join(out, "report.json"))
    return report
