"""Stage orchestration: baseline filtering, sampling, curation, evaluation,
and the self-evolved loop.

Every stage is resumable: outputs are written together with a stage
manifest carrying a fingerprint of (inputs, seed, config); re-running a
completed stage with identical inputs is a byte-for-byte no-op. Loop-k
artifacts live under their own directory and never overwrite loop-(k-1).

The trainer is an external hook: a command template with {pairs_path} and
{loop} placeholders that must print the next model endpoint URL on stdout.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

from . import curator, metrics
from .config import Config
from .errors import (EmptyDataset, MissingInput, RunDirLocked, TrainerHookFailed,
                     ValidationError)
from .gateway import CompletionClient, GenerationRequest
from .metrics import MethodResult, RemoteJudge
from .sampler import (EntropyStrategy, SamplerConfig, VanillaStrategy, derive_seed,
                      run_episode, sample_for_curation)
from .toolbox import LocalSearchIndex, RemoteSearch, ToolRunner
from .types import (MAIN_CHAIN, RunManifest, SamplePool, dumps_canonical, make_pool,
                    read_pairs, read_sample_records, read_trajectories,
                    write_pairs, write_sample_records, write_trajectories)

NO_TOOL_TEMPLATE = ("Answer the question below. Reason inside <think>...</think> "
                    "tags, then give the final answer inside <answer>...</answer> "
                    "tags. Do not call any tools.\n\nQuestion: {question}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class RunLock:
    """One process owns a run directory at a time."""

    def __init__(self, run_dir: Path):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            try:
                pid = int(self.path.read_text().strip())
                os.kill(pid, 0)
                raise RunDirLocked(f"{self.path.parent} locked by pid {pid}")
            except (ValueError, ProcessLookupError, PermissionError):
                self.path.unlink(missing_ok=True)  # stale lock
        self.path.write_text(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _fingerprint(*parts) -> str:
    digest = hashlib.sha256()
    for part in parts:
        if isinstance(part, (str, int, float)):
            digest.update(str(part).encode())
        elif isinstance(part, Path):
            digest.update(Path(part).read_bytes())
        else:
            digest.update(dumps_canonical(part).encode())
        digest.update(b"\x00")
    return digest.hexdigest()


def _stage_complete(manifest_path: Path, fingerprint: str, outputs: list[Path]) -> bool:
    if not manifest_path.exists():
        return False
    try:
        recorded = json.loads(manifest_path.read_text())
    except json.JSONDecodeError:
        return False
    return (recorded.get("fingerprint") == fingerprint
            and all(p.exists() for p in outputs))


def _write_stage_manifest(manifest_path: Path, fingerprint: str, extra: dict) -> None:
    payload = {"fingerprint": fingerprint, "created_at": _now(), **extra}
    manifest_path.write_text(json.dumps(payload, sort_keys=True, indent=1))


def build_tool_runner(cfg: Config) -> ToolRunner:
    backend = None
    if cfg.get("tool", "search.backend") == "remote":
        backend = RemoteSearch(cfg.get("tool", "search.remote_url"))
    elif cfg.get("tool", "search.corpus"):
        backend = LocalSearchIndex.from_jsonl(cfg.get("tool", "search.corpus"))
    return ToolRunner(search_backend=backend,
                      code_interpreter=cfg.get("tool", "code.interpreter") or None,
                      code_timeout_ms=cfg.get("tool", "code.timeout_ms"),
                      search_k=cfg.get("tool", "search.k"))


def build_judge(cfg: Config) -> RemoteJudge | None:
    if cfg.get("scoring", "math.backend") == "remote":
        return RemoteJudge(cfg.get("scoring", "math.judge_url"))
    return None


def _client(endpoint: str) -> CompletionClient:
    return CompletionClient(endpoint)


def _extract_answer(text: str) -> str | None:
    start = text.rfind("<answer>")
    if start == -1:
        return None
    return text[start + len("<answer>"):]


def cmd_infer_baseline(cfg: Config, run_dir: Path, client=None) -> Path:
    """Tool-free inference over the SFT corpus; write the retained source set."""
    corpus_path = cfg.get("data", "sft_corpus")
    if not corpus_path or not os.path.exists(corpus_path):
        raise MissingInput(corpus_path or "<data.sft_corpus unset>")
    rows = read_sample_records(corpus_path)
    if not rows:
        raise ValidationError("EmptyInput: SFT corpus has no rows")

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out_path = run_dir / "d_source.jsonl"
    manifest_path = run_dir / "manifest_infer_baseline.json"
    seed = cfg.get("run", "seed")
    fp = _fingerprint("infer-baseline", Path(corpus_path), seed,
                      cfg.get("run", "endpoint"))
    if _stage_complete(manifest_path, fp, [out_path]):
        return out_path

    client = client or _client(cfg.get("run", "endpoint"))
    judge = build_judge(cfg)
    predictions: dict[str, str | None] = {}
    for row in rows:
        prompt = NO_TOOL_TEMPLATE.format(question=row.question)
        req = GenerationRequest(prefix_text=prompt, stop_sequences=("</answer>",),
                                max_new_tokens=cfg.get("sampling", "max_call_tokens"),
                                temperature=cfg.get("sampling", "temperature"),
                                top_logprobs=cfg.get("sampling", "top_logprobs"),
                                seed=derive_seed(seed, row.sample_id, "baseline"))
        tokens, finish = client.generate(req)
        text = "".join(t.token_text for t in tokens)
        predictions[row.sample_id] = (_extract_answer(text)
                                      if finish.stop_sequence == "</answer>" else None)
    retained = curator.build_d_source(rows, predictions, judge)
    write_sample_records(out_path, retained)
    _write_stage_manifest(manifest_path, fp, {
        "rows_in": len(rows), "rows_retained": len(retained),
        "retention_rate": len(retained) / len(rows)})
    return out_path


def cmd_sample(cfg: Config, run_dir: Path, strategy_name: str, loop_index: int = 1,
               endpoint: str | None = None, client=None) -> Path:
    """Sample pools for every source-set question under one strategy."""
    run_dir = Path(run_dir)
    d_source = run_dir / "d_source.jsonl"
    if not d_source.exists():
        raise MissingInput(d_source)
    loop_dir = run_dir / f"loop_{loop_index}"
    loop_dir.mkdir(parents=True, exist_ok=True)
    out_path = loop_dir / f"pools_{strategy_name}.jsonl"
    sidecar = loop_dir / f"pools_{strategy_name}.logprobs.jsonl"
    manifest_path = loop_dir / f"manifest_sample_{strategy_name}.json"

    endpoint = endpoint or cfg.get("run", "endpoint")
    seed = cfg.get("run", "seed")
    sampler_cfg = cfg.sampler_config()
    fp = _fingerprint(f"sample-{strategy_name}-{loop_index}", d_source, seed,
                      endpoint, cfg.snapshot())
    if _stage_complete(manifest_path, fp, [out_path, sidecar]):
        return out_path

    client = client or _client(endpoint)
    tools = build_tool_runner(cfg)
    judge = build_judge(cfg)
    if strategy_name == curator.VANILLA:
        strategy = VanillaStrategy(m=sampler_cfg.rollouts)
    else:
        strategy = EntropyStrategy(k=sampler_cfg.branch_k, b=sampler_cfg.branch_b)

    samples = read_sample_records(d_source)
    all_trajs = []
    total_new_tokens = 0
    episodes = failures = 0
    # loop index participates in seed derivation so later loops resample fresh
    loop_seed = derive_seed(seed, f"loop-{loop_index}", strategy_name)
    for sample in samples:
        pool, stats = sample_for_curation(sample, strategy, loop_seed, client,
                                          tools, sampler_cfg, judge)
        all_trajs.extend(pool.trajectories)
        total_new_tokens += stats.new_tokens
        episodes += stats.episodes
        failures += stats.failures
    write_trajectories(out_path, all_trajs, sidecar)
    _write_stage_manifest(manifest_path, fp, {
        "strategy": strategy_name, "loop_index": loop_index,
        "samples": len(samples), "trajectories": len(all_trajs),
        "episodes": episodes, "failures": failures,
        "generated_tokens": total_new_tokens, "endpoint": endpoint})
    return out_path


def _pools_from_file(path: Path, sidecar: Path) -> dict[str, SamplePool]:
    trajs = read_trajectories(path, sidecar if sidecar.exists() else None)
    by_sample: dict[str, list] = {}
    for t in trajs:
        by_sample.setdefault(t.sample_id, []).append(t)
    return {sid: make_pool(sid, members) for sid, members in by_sample.items()}


def cmd_curate(cfg: Config, run_dir: Path, criteria: str, loop_index: int = 1) -> Path:
    """Classify pools, select pairs, assemble the ratio-mixed dataset."""
    run_dir = Path(run_dir)
    loop_dir = run_dir / f"loop_{loop_index}"
    d_source = run_dir / "d_source.jsonl"
    if not d_source.exists():
        raise MissingInput(d_source)
    samples = {r.sample_id: r for r in read_sample_records(d_source)}

    pool_files = [(name, loop_dir / f"pools_{name}.jsonl")
                  for name in (curator.VANILLA, curator.ENTROPY)
                  if (loop_dir / f"pools_{name}.jsonl").exists()]
    if not pool_files:
        raise MissingInput(loop_dir / "pools_*.jsonl")

    out_path = loop_dir / "pairs.jsonl"
    manifest_path = loop_dir / "manifest_curate.json"
    seed = cfg.get("run", "seed")
    fp = _fingerprint(f"curate-{criteria}-{loop_index}", seed, cfg.snapshot(),
                      *[p for _, p in pool_files])
    if _stage_complete(manifest_path, fp, [out_path]):
        return out_path

    criteria_cfg = cfg.criteria_config()
    pairs = []
    dropped = 0
    classified: dict[str, int] = {"hard": 0, "easy": 0, "discard": 0}
    for strategy_name, path in pool_files:
        sidecar = Path(str(path).replace(".jsonl", ".logprobs.jsonl"))
        for sample_id, pool in sorted(_pools_from_file(path, sidecar).items()):
            sample = samples.get(sample_id)
            if sample is None:
                continue
            label = curator.classify_sample(pool, criteria_cfg, criteria, strategy_name)
            classified[label] += 1
            if label == curator.DISCARD:
                continue
            if criteria == curator.CRI1:
                pair = curator.select_pair_cri1(pool, label, strategy_name, sample,
                                                loop_index)
            else:
                pair = curator.select_pair_cri2(pool, label, sample, strategy_name,
                                                loop_index)
            if pair is None:
                dropped += 1
            else:
                pairs.append(pair)
    if not pairs:
        raise EmptyDataset("curation produced no pairs")
    dataset, stats = curator.assemble_dataset(pairs, criteria_cfg, seed)
    violations = curator.validate_pairs(dataset)
    if violations:
        raise ValidationError("curated dataset fails validation: "
                              + "; ".join(violations[:5]))
    write_pairs(out_path, dataset)
    _write_stage_manifest(manifest_path, fp, {
        "criteria": criteria, "loop_index": loop_index,
        "pairs_selected": len(pairs), "pairs_kept": len(dataset),
        "dropped_no_pair": dropped, "classified": classified,
        "assembly": stats.to_dict()})
    return out_path


def cmd_validate_pairs(pairs_path: Path) -> list[str]:
    pairs_path = Path(pairs_path)
    if not pairs_path.exists():
        raise MissingInput(pairs_path)
    return curator.validate_pairs(read_pairs(pairs_path))


def cmd_evaluate(cfg: Config, run_dir: Path, endpoints: dict[str, str],
                 eval_set: str | None = None, tag: str = "eval",
                 clients: dict | None = None) -> tuple[Path, dict[str, float]]:
    """Run the eval set against each endpoint and write the metric report."""
    eval_set = eval_set or cfg.get("loop", "eval_set")
    if not eval_set or not os.path.exists(eval_set):
        raise MissingInput(eval_set or "<loop.eval_set unset>")
    samples = read_sample_records(eval_set)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sampler_cfg = cfg.sampler_config()
    judge = build_judge(cfg)
    seed = cfg.get("run", "seed")

    results = []
    pools_by_method: dict[str, list[SamplePool]] = {}
    for name, endpoint in sorted(endpoints.items()):
        client = (clients or {}).get(name) or _client(endpoint)
        tools = build_tool_runner(cfg)
        records = []
        pools = []
        for sample in samples:
            traj, _ = run_episode(sample, derive_seed(seed, sample.sample_id,
                                                      f"eval-{name}"),
                                  client, tools, sampler_cfg,
                                  traj_id=f"{sample.sample_id}-{name}",
                                  origin=MAIN_CHAIN)
            score = metrics.score_answer(traj.final_answer, sample, judge)
            traj = traj.with_score(score)
            pools.append(make_pool(sample.sample_id, [traj]))
            records.append((sample.sample_id, score, traj.tool_call_count))
        results.append(MethodResult(method_name=name, records=tuple(records)))
        pools_by_method[name] = pools

    csv_text, human_text = metrics.run_report(pools_by_method, results, dataset=tag)
    csv_path = run_dir / f"report_{tag}.csv"
    csv_path.write_text(csv_text)
    (run_dir / f"report_{tag}.txt").write_text(human_text)
    mean_scores = {r.method_name: (sum(m for _, m, _ in r.records) / len(r.records)
                                   if r.records else 0.0)
                   for r in results}
    return csv_path, mean_scores


def invoke_trainer_hook(template: str, pairs_path: Path, loop_index: int) -> str:
    """Run the external trainer; its stdout's last line is the next endpoint."""
    command = [part.format(pairs_path=str(pairs_path), loop=loop_index)
               for part in shlex.split(template)]
    proc = subprocess.run(command, capture_output=True, text=True)
    if proc.returncode != 0:
        raise TrainerHookFailed(proc.returncode, proc.stderr.strip()[:500])
    lines = [line for line in proc.stdout.splitlines() if line.strip()]
    if not lines:
        raise TrainerHookFailed(0, "trainer printed no endpoint URL")
    return lines[-1].strip()


def run_self_evolved_loop(cfg: Config, run_dir: Path | None = None,
                          clients: dict | None = None) -> RunManifest:
    """Sample -> curate -> train -> evaluate until convergence or max_loops.

    Loop 1 curates with Cri1 over vanilla + entropy pools; later loops
    resample the same question set from the latest trained endpoint and
    curate with Cri2. Convergence is an absolute mean eval-score delta
    below epsilon.
    """
    run_dir = Path(run_dir or cfg.get("run", "run_dir"))
    max_loops = cfg.get("loop", "max_loops")
    epsilon = cfg.get("loop", "convergence_epsilon")
    trainer_hook = cfg.get("loop", "trainer_hook")
    endpoints_by_loop = cfg.loop_endpoints()
    run_id = f"run-{cfg.get('run', 'seed')}"

    with RunLock(run_dir):
        cmd_infer_baseline(cfg, run_dir,
                           client=(clients or {}).get("loop0"))
        endpoint = endpoints_by_loop.get(0, cfg.get("run", "endpoint"))
        prev_score = _eval_mean(cfg, run_dir, endpoint, "loop0", clients)
        manifest = None
        for loop_index in range(1, max_loops + 1):
            endpoint = endpoints_by_loop.get(loop_index - 1, endpoint)
            criteria = curator.CRI1 if loop_index == 1 else curator.CRI2
            client = (clients or {}).get(f"loop{loop_index - 1}") \
                or (clients or {}).get("loop0")
            for strategy_name in (curator.VANILLA, curator.ENTROPY):
                cmd_sample(cfg, run_dir, strategy_name, loop_index,
                           endpoint=endpoint, client=client)
            pairs_path = cmd_curate(cfg, run_dir, criteria, loop_index)
            next_endpoint = invoke_trainer_hook(trainer_hook, pairs_path, loop_index)
            score = _eval_mean(cfg, run_dir, next_endpoint, f"loop{loop_index}",
                               clients)
            loop_dir = run_dir / f"loop_{loop_index}"
            manifest = RunManifest(
                run_id=run_id, loop_index=loop_index, model_endpoint=next_endpoint,
                config_snapshot=cfg.snapshot(),
                dataset_paths={"pairs": str(pairs_path),
                               "d_source": str(run_dir / "d_source.jsonl")},
                metrics={"eval_mean_score": score if score is not None else -1.0,
                         "prev_mean_score": prev_score if prev_score is not None else -1.0},
                created_at=_now())
            (loop_dir / "run_manifest.json").write_text(
                json.dumps({**manifest.to_dict(), "criteria": criteria},
                           sort_keys=True, indent=1))
            endpoint = next_endpoint
            if (score is not None and prev_score is not None
                    and abs(score - prev_score) < epsilon):
                break
            prev_score = score
        return manifest


def _eval_mean(cfg: Config, run_dir: Path, endpoint: str, tag: str,
               clients: dict | None) -> float | None:
    if not cfg.get("loop", "eval_set"):
        return None
    client = (clients or {}).get(tag) or (clients or {}).get("loop0")
    _, scores = cmd_evaluate(cfg, run_dir, {"model": endpoint}, tag=tag,
                             clients={"model": client} if client else None)
    return scores.get("model")
