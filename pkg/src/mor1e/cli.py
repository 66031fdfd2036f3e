"""Command-line entry point: ``mor1e {cluster,intuition,train,cost}``.

Exit codes: 0 success, 2 usage or precondition failure, 1 runtime failure.
Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys mirror the long flag names; flags given on the command line win.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .baselines import (
    FLOP_CONVENTION,
    SHIPPED_ARCHS,
    SHIPPED_BASE_PARAMS,
    ArchFileError,
    CostReport,
    Scheme,
    count_params,
    load_arch,
)
from .intuition import (
    EXTERNAL,
    SYNTHETIC,
    CentroidFileError,
    EmbedderSpec,
    EmbeddingServiceError,
    adjusted_rand_index,
    build_centroids,
    embed,
    intuition_matrix,
    load_centroids,
    save_centroids,
    stack,
)
from .numeric import derive_seed, make_rng
from .rank1 import DIAGONAL, FULL, FUSION_INTUITION, FUSION_MODES, FUSION_NONE
from .toymodel import SyntheticTaskSpec, ToyModelConfig, generate_multitask_data, load_dataset
from .trainer import TrainConfig, build_reference, run_experiment


class UsageError(Exception):
    """Bad flag combination or violated precondition (exit code 2)."""


# ---------------------------------------------------------------------------
# argument parsing


def _add_embedder_flags(p):
    g = p.add_argument_group("embedder")
    g.add_argument("--embedder", choices=[SYNTHETIC, EXTERNAL], default=SYNTHETIC, help="embedding backend")
    g.add_argument("--dim", type=int, default=None, help="embedding dimension (default: 16, or the centroid file's d)")
    g.add_argument("--embed-seed", type=int, default=0, help="synthetic embedder seed")
    g.add_argument("--archetypes", type=int, default=None, help="synthetic embedder archetype count")
    g.add_argument("--noise", type=float, default=0.3, help="synthetic embedder noise scale")
    g.add_argument("--endpoint", default="", help="embedding service URL")
    g.add_argument("--model", default="", help="embedding service model name")
    g.add_argument("--api-key-env", default="EMBED_API_KEY", help="environment variable holding the API key")
    g.add_argument("--cache", default=None, help="embedding cache file")
    g.add_argument("--timeout", type=float, default=30.0, help="service request timeout in seconds")
    g.add_argument("--retries", type=int, default=3, help="service retries per batch")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mor1e", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="embed a text sample and write k-means centroids", formatter_class=fmt)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="file with one text per line")
    src.add_argument("--synthetic", help="planted corpus spec, e.g. 'archetypes=3,per=50'")
    p.add_argument("--k", type=int, required=True, help="number of centroids")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", required=True, help="centroid file to write")
    p.add_argument("--sample-size", type=int, default=None, help="texts sampled for clustering (default min(512k, all))")
    p.add_argument("--max-iters", type=int, default=100, help="Lloyd iteration cap")
    p.add_argument("--tol", type=float, default=1e-8, help="centroid displacement tolerance")
    p.add_argument("--n-init", type=int, default=8, help="k-means++ restarts; the lowest objective wins")
    p.add_argument("--normalize", action="store_true", help="length-normalise embeddings before clustering")
    _add_embedder_flags(p)
    p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("intuition", help="print intuition scores for texts", formatter_class=fmt)
    p.add_argument("--centroids", required=True, help="centroid file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--text", action="append", help="text to score (repeatable)")
    src.add_argument("--input", help="file with one text per line")
    _add_embedder_flags(p)
    p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("train", help="train an adapter scheme on the toy multitask benchmark", formatter_class=fmt)
    p.add_argument("--scheme", choices=["lora", "molora", "mor1e"], default="mor1e", help="adapter scheme")
    p.add_argument("--fusion", choices=list(FUSION_MODES), default=FUSION_NONE, help="routing reference")
    p.add_argument("--routing", choices=[DIAGONAL, FULL], default=DIAGONAL, help="gate matrix structure")
    p.add_argument("--experts", type=int, default=4, help="experts per adapter (molora, mor1e)")
    p.add_argument("--rank", type=int, default=4, help="rank per expert (lora, molora)")
    p.add_argument("--top-k", type=int, default=None, help="top-k routing for molora")
    p.add_argument("--data", default="tasks=4,count=1200",
                   help="dataset file, or a spec 'tasks=..,count=..,separation=..,noise=..,seq_len=..'")
    p.add_argument("--centroids", default=None, help="centroid file for intuition fusion")
    p.add_argument("--oracle-intuition", action="store_true", help="use one-hot task similarity as intuition")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", required=True, help="directory for metrics CSVs")
    p.add_argument("--lr", type=float, default=1e-2, help="peak learning rate")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, help="batch size")
    p.add_argument("--schedule", choices=["cosine", "constant"], default="cosine", help="learning-rate schedule")
    p.add_argument("--embed-dim", type=int, default=16, help="toy model width")
    p.add_argument("--ffn-dim", type=int, default=32, help="toy model FFN width")
    _add_embedder_flags(p)
    p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("cost", help="print trainable-parameter and FLOP accounting as CSV", formatter_class=fmt)
    p.add_argument("--arch", default="7b", help=f"arch file ('name m n count' per line) or one of {', '.join(SHIPPED_ARCHS)}")
    p.add_argument("--scheme", action="append", choices=["lora", "molora", "mor1e"], default=None,
                   help="scheme to report (repeatable; default all three)")
    p.add_argument("--experts", type=int, default=20, help="mor1e expert count")
    p.add_argument("--rank", type=int, default=32, help="lora rank")
    p.add_argument("--molora-experts", type=int, default=8, help="molora expert count")
    p.add_argument("--molora-rank", type=int, default=4, help="molora rank per expert")
    p.add_argument("--routing", choices=[DIAGONAL, FULL], default=DIAGONAL, help="mor1e gate structure")
    p.add_argument("--fusion", choices=list(FUSION_MODES), default=FUSION_INTUITION, help="mor1e routing reference")
    p.add_argument("--base-params", type=int, default=None, help="base model parameter count for percentages")
    p.add_argument("--config", default=None, help="key = value config file")
    return parser


def read_config_file(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    config = _config_path(argv)
    command = next((tok for tok in argv if not tok.startswith("-")), None)
    if config and command in ("cluster", "intuition", "train", "cost"):
        # config values become defaults before parsing, so they can satisfy required flags
        sp = _subparser(parser, command)
        actions = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        try:
            values = read_config_file(config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        defaults = {}
        for key, raw in values.items():
            if key not in actions:
                raise UsageError(f"{config}: unknown key {key!r}")
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(action, argparse._AppendAction):
                defaults[key] = [v.strip() for v in raw.split(",")]
            else:
                conv = action.type or str
                try:
                    defaults[key] = conv(raw)
                except ValueError:
                    raise UsageError(f"{config}: bad value for {key}: {raw!r}") from None
                if action.choices is not None and defaults[key] not in action.choices:
                    raise UsageError(f"{config}: {key} must be one of {list(action.choices)}")
            # a config value satisfies a required flag
            action.required = False
        for grp in sp._mutually_exclusive_groups:
            given = [a for a in grp._group_actions
                     if any(tok == o or tok.startswith(o + "=") for o in a.option_strings for tok in argv)]
            if given:
                # a flag on the command line displaces the config's choice from the same group
                for a in grp._group_actions:
                    if a not in given:
                        defaults.pop(a.dest, None)
            if any(a.dest in defaults for a in grp._group_actions):
                grp.required = False
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def print_config(args) -> None:
    for key in sorted(vars(args)):
        print(f"# {key} = {getattr(args, key)}", file=sys.stderr)


def embedder_spec(args, dim: int | None = None, archetypes: int | None = None) -> EmbedderSpec:
    d = args.dim if args.dim is not None else (dim or 16)
    if args.embedder == EXTERNAL:
        if not args.endpoint or not args.model:
            raise UsageError("--embedder service needs --endpoint and --model")
        return EmbedderSpec(kind=EXTERNAL, dim=d, endpoint=args.endpoint, model=args.model,
                            api_key_env=args.api_key_env, timeout=args.timeout, retries=args.retries,
                            cache_path=args.cache)
    a = args.archetypes or archetypes or min(4, d)
    if a > d:
        raise UsageError(f"--archetypes ({a}) cannot exceed --dim ({d})")
    return EmbedderSpec(kind=SYNTHETIC, dim=d, seed=args.embed_seed, archetypes=a, noise=args.noise,
                        cache_path=args.cache)


def _parse_kv(spec: str, flag: str) -> dict:
    out = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise UsageError(f"{flag}: expected key=value items, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_lines(path: str) -> list[str]:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    return [ln for ln in lines if ln.strip()]


# ---------------------------------------------------------------------------
# subcommands


def cmd_cluster(args) -> int:
    planted = None
    archetypes = None
    if args.synthetic is not None:
        kv = _parse_kv(args.synthetic, "--synthetic")
        unknown = set(kv) - {"archetypes", "per"}
        if unknown:
            raise UsageError(f"--synthetic: unknown keys {sorted(unknown)}")
        archetypes = int(kv.get("archetypes", args.k))
        per = int(kv.get("per", 50))
        texts = [f"@{a} item-{i}" for a in range(archetypes) for i in range(per)]
        planted = np.repeat(np.arange(archetypes), per)
    else:
        texts = _read_lines(args.input)
    if args.k < 2:
        raise UsageError(f"--k must be >= 2, got {args.k}")
    spec = embedder_spec(args, archetypes=archetypes)
    n_sample = min(512 * args.k if args.sample_size is None else args.sample_size, len(texts))
    if args.k > n_sample:
        raise UsageError(f"--k={args.k} exceeds the number of sampled texts ({n_sample})")
    centroids, fit, idx = build_centroids(texts, spec, args.k, derive_seed(args.seed, "cluster"),
                                          sample_size=args.sample_size, max_iters=args.max_iters,
                                          tol=args.tol, normalize=args.normalize, n_init=args.n_init)
    save_centroids(centroids, args.out)
    sizes = np.bincount(fit.labels, minlength=args.k)
    print(f"wcss {fit.inertia:.10g}")
    print("cluster_sizes " + " ".join(str(int(s)) for s in sizes))
    print(f"iterations {fit.n_iter} converged {fit.converged}")
    if planted is not None:
        print(f"ari {adjusted_rand_index(planted[idx], fit.labels):.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_intuition(args) -> int:
    centroids = load_centroids(args.centroids)
    if args.dim is not None and args.dim != centroids.dim:
        raise UsageError(f"embedder dim {args.dim} does not match centroid dim {centroids.dim}")
    spec = embedder_spec(args, dim=centroids.dim, archetypes=_fingerprint_archetypes(centroids.fingerprint))
    if spec.fingerprint != centroids.fingerprint:
        logging.getLogger(__name__).warning("embedder %s differs from centroid fingerprint %s",
                                            spec.fingerprint, centroids.fingerprint)
    texts = args.text if args.text is not None else _read_lines(args.input)
    if not texts:
        raise UsageError("no texts to score")
    scores = intuition_matrix(stack(embed(spec, texts)), centroids)
    for row in scores:
        print(" ".join(f"{s:.6f}" for s in row))
    return 0


def _fingerprint_archetypes(fp: str) -> int | None:
    for part in fp.split(":"):
        if part.startswith("a="):
            return int(part[2:])
    return None


def _load_data(arg: str, seed: int):
    if os.path.exists(arg):
        return load_dataset(arg)
    kv = _parse_kv(arg, "--data")
    known = {"tasks", "count", "separation", "noise", "seq_len", "markers", "content", "classes"}
    unknown = set(kv) - known
    if unknown:
        raise UsageError(f"--data: {arg!r} is not a file and has unknown keys {sorted(unknown)}")
    try:
        spec = SyntheticTaskSpec(
            k_tasks=int(kv.get("tasks", 4)),
            markers_per_task=int(kv.get("markers", 4)),
            content_vocab=int(kv.get("content", 32)),
            seq_len=int(kv.get("seq_len", 12)),
            num_classes=int(kv.get("classes", 2)),
            separation=float(kv.get("separation", 0.5)),
            noise=float(kv.get("noise", 0.0)),
        )
        count = int(kv.get("count", 1200))
        if count < spec.k_tasks:
            raise ValueError(f"count ({count}) must be at least tasks ({spec.k_tasks})")
    except ValueError as exc:
        raise UsageError(f"--data: {exc}") from None
    data_seed = derive_seed(seed, "data")
    return generate_multitask_data(spec, count, make_rng(data_seed), data_seed)


def cmd_train(args) -> int:
    if args.scheme != "mor1e" and args.fusion != FUSION_NONE:
        raise UsageError(f"--fusion {args.fusion} conflicts with --scheme {args.scheme} (fusion needs mor1e)")
    if args.scheme != "mor1e" and args.routing != DIAGONAL:
        raise UsageError(f"--routing {args.routing} conflicts with --scheme {args.scheme} (full routing needs mor1e)")
    if args.fusion == FUSION_INTUITION and not args.centroids and not args.oracle_intuition:
        raise UsageError("--fusion intuition needs --centroids or --oracle-intuition")
    if args.centroids and args.oracle_intuition:
        raise UsageError("--centroids and --oracle-intuition are mutually exclusive")
    if args.top_k is not None and args.scheme != "molora":
        raise UsageError(f"--top-k conflicts with --scheme {args.scheme} (top-k is a molora option)")
    if args.rank < 1:
        raise UsageError("--rank must be >= 1")
    if args.experts < 1:
        raise UsageError("--experts must be >= 1")
    data = _load_data(args.data, args.seed)
    source = None
    embed_spec = None
    if args.fusion == FUSION_INTUITION:
        if args.oracle_intuition:
            source = "oracle"
            if data.spec.k_tasks > args.experts:
                raise UsageError(f"--oracle-intuition needs --experts >= tasks ({data.spec.k_tasks})")
        else:
            source = load_centroids(args.centroids)
            if source.k != args.experts:
                raise UsageError(f"--centroids has k={source.k} but --experts={args.experts}; intuition fusion needs K == N")
            embed_spec = embedder_spec(args, dim=source.dim, archetypes=_fingerprint_archetypes(source.fingerprint))
    try:
        cfg = ToyModelConfig(vocab_size=data.spec.vocab_size, embed_dim=args.embed_dim, ffn_dim=args.ffn_dim,
                             seq_len=data.spec.seq_len, num_classes=data.spec.num_classes, scheme=args.scheme,
                             experts=args.experts, rank=args.rank, fusion=args.fusion, routing=args.routing,
                             top_k=args.top_k, seed=args.seed)
        tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                           schedule=args.schedule, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    reference = build_reference(data, args.fusion, args.experts, source, embed_spec)
    log = run_experiment(cfg, tcfg, data, reference)
    log.write_csv(args.out)
    for epoch, secs in enumerate(log.wall_clock, start=1):
        print(f"epoch {epoch} loss {log.epoch_mean_losses()[epoch - 1]:.6f} wall {secs:.3f}s", file=sys.stderr)
    print(f"{args.scheme} {args.fusion} {args.routing} {log.final_accuracy():.6f} {log.trainable_params}")
    return 0


def cmd_cost(args) -> int:
    try:
        arch = load_arch(args.arch)
    except FileNotFoundError:
        raise UsageError(f"--arch {args.arch!r} is neither a file nor a shipped arch ({', '.join(SHIPPED_ARCHS)})") from None
    base = args.base_params if args.base_params is not None else SHIPPED_BASE_PARAMS.get(args.arch)
    kinds = args.scheme or ["lora", "molora", "mor1e"]
    try:
        schemes = []
        for kind in kinds:
            if kind == "lora":
                schemes.append(Scheme("lora", rank=args.rank))
            elif kind == "molora":
                schemes.append(Scheme("molora", rank=args.molora_rank, experts=args.molora_experts))
            else:
                schemes.append(Scheme("mor1e", experts=args.experts, routing=args.routing, fusion=args.fusion))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"# {FLOP_CONVENTION}", file=sys.stderr)
    print(CostReport.CSV_HEADER)
    for s in schemes:
        print(count_params(arch, s, base).csv_row())
    return 0


COMMANDS = {"cluster": cmd_cluster, "intuition": cmd_intuition, "train": cmd_train, "cost": cmd_cost}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        print_config(args)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, ArchFileError, CentroidFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EmbeddingServiceError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
