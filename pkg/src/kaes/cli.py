"""Command-line interface.

Subcommands mirror the pipeline stages: ``ingest`` validates a data file,
``codebook``/``kernel``/``train``/``predict`` run individual stages, and
``eval-indomain``/``eval-crossdomain``/``report`` run the full protocols and
render result tables.  Every flag can also be given in a flat key=value
config file (``--config``); explicit flags win over file values.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .boswe import fit_codebook, load_codebook, save_codebook, boswe_kernel_matrix, build_histogram
from .corpus import ASAP_SCORE_RANGES, parse_asap_tsv, unscale_score
from .embeddings import DEFAULT_VOCAB_LIMIT, load_word2vec_binary, lookup, tokenize
from .errors import KaesError
from .fusion import sum_kernels
from .harness import (
    DEFAULT_SUBSAMPLE_SIZES,
    ExperimentConfig,
    emit_report,
    normalized_hisk_gram,
    parse_config_file,
    run_cross_domain,
    run_in_domain,
    table_from_csv,
)
from .string_kernel import (
    DEFAULT_NGRAM_MAX,
    DEFAULT_NGRAM_MIN,
    extract_ngram_counts,
    kernel_matrix,
    normalize_kernel,
    save_kernel_matrix,
)
from .svr import SvrConfig, load_svr_model, predict, save_svr_model, train_nu_svr

class _Resolver:
    """Merge argparse values with config-file values (flags win)."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict[str, str] = {}
        if getattr(args, "config", None):
            self.file = parse_config_file(args.config)

    def get(self, key: str, cast=str, default=None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.file:
            raw = self.file[key]
            if cast is bool:
                return raw.lower() in ("1", "true", "yes")
            return cast(raw)
        return default


def _parse_nt(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip() != "")


def _vocab_limit(resolver: _Resolver) -> int | None:
    limit = resolver.get("vocab_limit", int, DEFAULT_VOCAB_LIMIT)
    return None if limit == 0 else limit


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="ASAP-format TSV file")
    p.add_argument("--prompt", type=int, help="prompt id 1-8")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--representation", choices=("hisk", "boswe", "fused"))
    p.add_argument("--embeddings", help="word2vec binary embeddings file")
    p.add_argument("--ngram-min", type=int, dest="ngram_min")
    p.add_argument("--ngram-max", type=int, dest="ngram_max")
    p.add_argument("--k", type=int, help="codebook size")
    p.add_argument("--c", type=float, help="regularization budget")
    p.add_argument("--nu", type=float, help="nu parameter in (0, 1]")
    p.add_argument("--kkt-tolerance", type=float, dest="kkt_tolerance")
    p.add_argument("--max-iterations", type=int, dest="max_iterations")
    p.add_argument("--kmeans-iters", type=int, dest="kmeans_iters")
    p.add_argument("--vocab-limit", type=int, dest="vocab_limit")
    p.add_argument("--seed", type=int)
    p.add_argument("--cache-dir", dest="cache_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kaes", description="Kernel-based automated essay scoring toolkit."
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and summarize a data file")
    p.add_argument("--config")
    _add_data_flags(p)

    p = sub.add_parser("codebook", help="fit a super-word codebook and save it")
    p.add_argument("--config")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="output codebook file")

    p = sub.add_parser("kernel", help="compute and cache an n-gram Gram matrix")
    p.add_argument("--config")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", help="explicit output path (defaults into --cache-dir)")

    p = sub.add_parser("train", help="train a scoring model on one prompt")
    p.add_argument("--config")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", required=True, help="output model file")

    p = sub.add_parser("predict", help="score essays with a trained model")
    p.add_argument("--config")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--model", required=True, help="model file from `train`")
    p.add_argument("--train-data", dest="train_data",
                   help="TSV with the training essays (defaults to --data)")
    p.add_argument("--codebook", help="codebook file (defaults to <model>.codebook)")
    p.add_argument("--out", help="write predictions TSV here instead of stdout")

    for name, extra in (("eval-indomain", False), ("eval-crossdomain", True)):
        p = sub.add_parser(name, help=f"run the {name.split('-')[1]} protocol")
        p.add_argument("--config")
        _add_data_flags(p)
        _add_model_flags(p)
        if extra:
            p.add_argument("--source", type=int)
            p.add_argument("--target", type=int)
            p.add_argument("--nt", help="comma-separated sub-sample sizes")
        p.add_argument("--repetitions", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--format", choices=("text", "csv"))
        p.add_argument("--out", help="also write the csv table to this path")

    p = sub.add_parser("report", help="re-render a saved result table")
    p.add_argument("--config")
    p.add_argument("--table", required=True, help="csv table from an eval run")
    p.add_argument("--format", choices=("text", "csv"))

    return parser


def _require(resolver: _Resolver, key: str, cast=str):
    value = resolver.get(key, cast)
    if value is None:
        raise KaesError(f"missing required option --{key.replace('_', '-')}")
    return value


def _experiment_config(resolver: _Resolver, mode: str) -> ExperimentConfig:
    svr = SvrConfig(
        c=resolver.get("c", float, 1000.0),
        nu=resolver.get("nu", float, 0.1),
        kkt_tolerance=resolver.get("kkt_tolerance", float, 1e-3),
        max_iterations=resolver.get("max_iterations", int, 10_000_000),
    )
    nt_raw = resolver.get("nt", str)
    cfg = ExperimentConfig(
        mode=mode,
        representation=resolver.get("representation", str, "hisk"),
        data_path=_require(resolver, "data"),
        prompt=resolver.get("prompt", int),
        source=resolver.get("source", int),
        target=resolver.get("target", int),
        embeddings_path=resolver.get("embeddings", str),
        cache_dir=resolver.get("cache_dir", str),
        ngram_min=resolver.get("ngram_min", int, DEFAULT_NGRAM_MIN),
        ngram_max=resolver.get("ngram_max", int, DEFAULT_NGRAM_MAX),
        k=resolver.get("k", int, 500),
        svr=svr,
        seed=resolver.get("seed", int, 42),
        folds=resolver.get("folds", int, 5),
        repetitions=resolver.get("repetitions", int),
        nt=_parse_nt(nt_raw) if nt_raw else DEFAULT_SUBSAMPLE_SIZES,
        vocab_limit=_vocab_limit(resolver),
        kmeans_iters=resolver.get("kmeans_iters", int, 100),
    )
    cfg.validate()
    return cfg


def _load_prompt_essays(resolver: _Resolver, data_key: str = "data"):
    data = Path(_require(resolver, data_key)).read_bytes()
    return parse_asap_tsv(data, prompt_filter=resolver.get("prompt", int))


def cmd_ingest(resolver: _Resolver) -> int:
    essays = _load_prompt_essays(resolver)
    by_prompt = Counter(e.prompt for e in essays)
    for prompt in sorted(by_prompt):
        scores = [e.raw_score for e in essays if e.prompt == prompt]
        declared = ASAP_SCORE_RANGES[prompt]
        print(
            f"prompt {prompt}: {by_prompt[prompt]} essays, "
            f"declared range {declared}, observed {min(scores)}-{max(scores)}"
        )
    print(f"total: {len(essays)} essays")
    return 0


def _token_type_vectors(essays, model):
    types = sorted({t for e in essays for t in tokenize(e.text)})
    vectors = [v for v in (lookup(model, t) for t in types) if v is not None]
    if not vectors:
        raise KaesError("no tokens of the data are covered by the embeddings")
    return np.vstack(vectors)


def cmd_codebook(resolver: _Resolver) -> int:
    essays = _load_prompt_essays(resolver)
    model = load_word2vec_binary(
        _require(resolver, "embeddings"), vocab_limit=_vocab_limit(resolver)
    )
    codebook = fit_codebook(
        _token_type_vectors(essays, model),
        k=resolver.get("k", int, 500),
        seed=resolver.get("seed", int, 42),
        max_iters=resolver.get("kmeans_iters", int, 100),
    )
    out = _require(resolver, "out")
    save_codebook(codebook, out)
    print(f"codebook: k={codebook.k} dim={codebook.dim} "
          f"distortion={codebook.distortion:.6f} -> {out}")
    return 0


def cmd_kernel(resolver: _Resolver) -> int:
    representation = resolver.get("representation", str, "hisk")
    if representation != "hisk":
        raise KaesError(
            "only the n-gram Gram matrix is cacheable ahead of time; histogram "
            "kernels depend on the per-fold codebook"
        )
    essays = _load_prompt_essays(resolver)
    out = resolver.get("out", str)
    cache_dir = resolver.get("cache_dir", str)
    if out is None and cache_dir is None:
        raise KaesError("give --out or --cache-dir to store the kernel matrix")
    cfg = ExperimentConfig(
        mode="in-domain",
        representation="hisk",
        data_path=_require(resolver, "data"),
        ngram_min=resolver.get("ngram_min", int, DEFAULT_NGRAM_MIN),
        ngram_max=resolver.get("ngram_max", int, DEFAULT_NGRAM_MAX),
        cache_dir=cache_dir,
    )
    if out is not None:
        profiles = [extract_ngram_counts(e.text, cfg.ngram_min, cfg.ngram_max) for e in essays]
        raw = kernel_matrix(profiles, row_ids=tuple(e.id for e in essays))
        save_kernel_matrix(raw, out)
        print(f"kernel: {raw.shape[0]}x{raw.shape[1]} hisk-raw -> {out}")
    else:
        normalized_hisk_gram(essays, cfg)
        print(f"kernel: {len(essays)}x{len(essays)} cached under {cache_dir}")
    return 0


def _train_blocks(resolver: _Resolver, essays, test_essays=None, codebook=None):
    """Kernel blocks for `train` (square) or `predict` (test x train)."""
    representation = resolver.get("representation", str, "hisk")
    ngram_min = resolver.get("ngram_min", int, DEFAULT_NGRAM_MIN)
    ngram_max = resolver.get("ngram_max", int, DEFAULT_NGRAM_MAX)
    ids = tuple(e.id for e in essays)
    profiles = [extract_ngram_counts(e.text, ngram_min, ngram_max) for e in essays]
    if test_essays is None:
        raw = kernel_matrix(profiles, row_ids=ids)
    else:
        test_profiles = [extract_ngram_counts(e.text, ngram_min, ngram_max) for e in test_essays]
        raw = kernel_matrix(
            test_profiles, profiles,
            row_ids=tuple(e.id for e in test_essays), col_ids=ids,
        )
    hisk = normalize_kernel(raw)
    if representation == "hisk":
        return hisk, codebook

    model = load_word2vec_binary(
        _require(resolver, "embeddings"), vocab_limit=_vocab_limit(resolver)
    )
    if codebook is None:
        codebook = fit_codebook(
            _token_type_vectors(essays, model),
            k=resolver.get("k", int, 500),
            seed=resolver.get("seed", int, 42),
            max_iters=resolver.get("kmeans_iters", int, 100),
        )
    hists = [build_histogram(codebook, tokenize(e.text), model) for e in essays]
    if test_essays is None:
        boswe = boswe_kernel_matrix(hists, row_ids=ids)
    else:
        test_hists = [build_histogram(codebook, tokenize(e.text), model) for e in test_essays]
        boswe = boswe_kernel_matrix(
            test_hists, hists, row_ids=tuple(e.id for e in test_essays), col_ids=ids
        )
    if representation == "boswe":
        return boswe, codebook
    return sum_kernels(hisk, boswe), codebook


def cmd_train(resolver: _Resolver) -> int:
    essays = _load_prompt_essays(resolver)
    if not essays:
        raise KaesError("no essays selected")
    k_train, codebook = _train_blocks(resolver, essays)
    svr = SvrConfig(
        c=resolver.get("c", float, 1000.0),
        nu=resolver.get("nu", float, 0.1),
        kkt_tolerance=resolver.get("kkt_tolerance", float, 1e-3),
        max_iterations=resolver.get("max_iterations", int, 10_000_000),
    )
    y = np.array([e.unit_score for e in essays])
    model = train_nu_svr(k_train, y, svr, seed=resolver.get("seed", int, 42))
    out = _require(resolver, "out")
    save_svr_model(model, out)
    if codebook is not None:
        save_codebook(codebook, out + ".codebook")
    print(
        f"model: {len(model.support_ids)}/{len(model.train_ids)} support vectors, "
        f"epsilon={model.epsilon_star:.6f}, converged={model.converged} -> {out}"
    )
    return 0


def cmd_predict(resolver: _Resolver) -> int:
    model_path = _require(resolver, "model")
    model = load_svr_model(model_path)
    train_key = "train_data" if resolver.get("train_data", str) else "data"
    train_essays = {e.id: e for e in _load_prompt_essays(resolver, data_key=train_key)}
    missing = [eid for eid in model.train_ids if eid not in train_essays]
    if missing:
        raise KaesError(f"training essays missing from --train-data: {missing[:5]}")
    support = set(model.support_ids)
    train_subset = [train_essays[eid] for eid in model.train_ids if eid in support]

    data = Path(_require(resolver, "data")).read_bytes()
    test_essays = parse_asap_tsv(data, prompt_filter=resolver.get("prompt", int))

    representation = resolver.get("representation", str, "hisk")
    codebook = None
    if representation in ("boswe", "fused"):
        codebook_path = resolver.get("codebook", str, model_path + ".codebook")
        codebook = load_codebook(codebook_path)
    k_eval, _ = _train_blocks(resolver, train_subset, test_essays, codebook=codebook)
    preds = predict(model, k_eval)

    lines = ["essay_id\tessay_set\tprediction"]
    for essay, value in zip(test_essays, preds):
        score = unscale_score(float(value), ASAP_SCORE_RANGES[essay.prompt])
        lines.append(f"{essay.id}\t{essay.prompt}\t{score}")
    output = "\n".join(lines) + "\n"
    out = resolver.get("out", str)
    if out:
        Path(out).write_text(output)
    else:
        sys.stdout.write(output)
    return 0


def cmd_eval(resolver: _Resolver, mode: str) -> int:
    cfg = _experiment_config(resolver, mode)
    table = run_in_domain(cfg) if mode == "in-domain" else run_cross_domain(cfg)
    fmt = resolver.get("format", str, "text")
    sys.stdout.buffer.write(emit_report(table, fmt))
    out = resolver.get("out", str)
    if out:
        Path(out).write_bytes(emit_report(table, "csv"))
    return 0


def cmd_report(resolver: _Resolver) -> int:
    table = table_from_csv(Path(_require(resolver, "table")).read_bytes())
    fmt = resolver.get("format", str, "text")
    sys.stdout.buffer.write(emit_report(table, fmt))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    resolver = _Resolver(args)
    handlers = {
        "ingest": cmd_ingest,
        "codebook": cmd_codebook,
        "kernel": cmd_kernel,
        "train": cmd_train,
        "predict": cmd_predict,
        "report": cmd_report,
    }
    try:
        if args.command == "eval-indomain":
            return cmd_eval(resolver, "in-domain")
        if args.command == "eval-crossdomain":
            return cmd_eval(resolver, "cross-domain")
        return handlers[args.command](resolver)
    except KaesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
