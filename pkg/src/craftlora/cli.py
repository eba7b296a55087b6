"""Command-line surface and end-to-end pipeline orchestration.

Exit codes: 0 success, 1 usage or config error, 2 data or corruption error,
3 numerical failure. Every command with a seed is bytewise reproducible.
"""

import json
import sys

import click
import numpy as np

from . import checkpoint as ckpt
from .adapters import LoraTrainer, default_routing
from .config import ENV_CONFIG, config_hash, load_config
from .denoiser import DenoiserTrainer, NoiseSchedule
from .exceptions import (
    ConfigInvalid,
    CorruptCheckpoint,
    CraftLoraError,
    HostMismatch,
    MarkerMissing,
    NumericalError,
)
from .guidance import GuidedSampler
from .metrics import (
    EvalReport,
    ImageFeatureExtractor,
    content_preservation,
    cross_influence,
    style_fidelity,
    write_report,
)
from .pairs import (
    CONTENT_PROMPTS,
    STYLE_PROMPTS,
    content_render,
    generate_pair_dataset,
    load_dataset,
    save_dataset,
    style_render,
)
from .pgm import read_pgm, write_pgm
from .subspace import TrunkFinetuner
from .utils import derive_seed

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3


def _schedule_from(config):
    return NoiseSchedule.linear(
        config.schedule.total_steps,
        config.schedule.beta_start,
        config.schedule.beta_end,
    )


def _load_run_config(path, seed):
    config = load_config(path)
    if seed is not None:
        config.seed = seed
    return config


def _train_base_denoiser(config, dataset):
    images = []
    embeddings = []
    from .prompts import encode_semantic

    for pair in dataset:
        images.append(pair.content_image)
        embeddings.append(encode_semantic(f"{pair.content_prompt} {pair.style_modifier}"))
        images.append(pair.style_image)
        embeddings.append(encode_semantic(f"{pair.content_modifier} {pair.style_prompt}"))
    trainer = DenoiserTrainer(
        image_size=config.denoiser.image_size,
        hidden_width=config.denoiser.hidden_width,
        n_layers=config.denoiser.n_layers,
        steps=config.denoiser.train_steps,
        batch_size=config.denoiser.batch_size,
        peak_lr=config.denoiser.peak_lr,
        start_lr=config.denoiser.start_lr,
        floor_lr=config.denoiser.floor_lr,
        warmup=config.denoiser.warmup,
        cond_dropout=config.denoiser.cond_dropout,
        schedule=_schedule_from(config),
        seed=derive_seed(config.seed, "base-denoiser"),
    )
    trainer.fit(np.stack(images), np.stack(embeddings))
    return trainer.backbone_


@click.group()
def cli():
    """Desk-scale content/style adapter pipeline."""


_config_option = click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    help=f"JSON config file (falls back to ${ENV_CONFIG}, then defaults).",
)
_seed_option = click.option("--seed", type=int, default=None, help="Override the config seed.")
_threads_option = click.option(
    "--threads", type=int, default=1, show_default=True,
    help="Worker threads; never changes numerical results.",
)


@cli.command("gen-pairs")
@_config_option
@_seed_option
@_threads_option
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--mode", type=click.Choice(["synthetic", "diffusion"]), default=None)
@click.option("--sigma", type=float, default=None)
@click.option("--n-content", type=int, default=None)
@click.option("--n-style", type=int, default=None)
@click.option("--backbone", "backbone_path", type=click.Path(dir_okay=False), default=None,
              help="Trained backbone checkpoint (diffusion mode).")
def cmd_gen_pairs(config_path, seed, threads, out_dir, mode, sigma, n_content, n_style, backbone_path):
    """Write the contrastive pair dataset (images plus manifest)."""
    config = _load_run_config(config_path, seed)
    if threads < 1:
        raise ConfigInvalid("--threads must be at least 1")
    ds = config.dataset
    backbone = ckpt.load_backbone(backbone_path) if backbone_path else None
    dataset = generate_pair_dataset(
        n_content=ds.n_content if n_content is None else n_content,
        n_style=ds.n_style if n_style is None else n_style,
        mode=ds.mode if mode is None else mode,
        seed=derive_seed(config.seed, "pairs"),
        sigma=ds.sigma if sigma is None else sigma,
        size=config.denoiser.image_size,
        backbone=backbone,
        schedule=_schedule_from(config),
        threads=threads,
    )
    save_dataset(out_dir, dataset)
    click.echo(f"wrote {len(dataset)} pairs to {out_dir}")


@cli.command("train-trunk")
@_config_option
@_seed_option
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--base", "base_path", type=click.Path(dir_okay=False), default=None,
              help="Base denoiser checkpoint; trained on the fly when omitted.")
@click.option("--save-base", "save_base_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the unprojected base weights (for --host plain runs).")
def cmd_train_trunk(config_path, seed, dataset_dir, out_path, base_path, save_base_path):
    """Rank-limited fine-tune of the backbone; emits host plus bases sidecar."""
    config = _load_run_config(config_path, seed)
    dataset = load_dataset(dataset_dir)
    if base_path:
        base = ckpt.load_backbone(base_path)
    else:
        base = _train_base_denoiser(config, dataset)
    if save_base_path:
        ckpt.save_backbone(save_base_path, base)
    tuner = TrunkFinetuner(
        r_max=config.trunk.r_max,
        r_min=config.trunk.r_min,
        steps=config.trunk.steps,
        batch_size=config.trunk.batch_size,
        peak_lr=config.trunk.peak_lr,
        start_lr=config.trunk.start_lr,
        floor_lr=config.trunk.floor_lr,
        warmup=config.trunk.warmup,
        lambda_reg=config.trunk.lambda_reg,
        alpha_perc=config.trunk.alpha_perc,
        schedule=_schedule_from(config),
        seed=derive_seed(config.seed, "trunk"),
    )
    tuner.fit(base, dataset)
    ckpt.save_backbone(out_path, tuner.backbone_)
    sidecar = []
    for name in tuner.backbone_.names:
        sidecar.append((f"{name}.content", tuner.bases_.content[name]))
        sidecar.append((f"{name}.style", tuner.bases_.style[name]))
    ckpt.save_tensor_set(out_path + ".bases", sidecar)
    final_loss = tuner.loss_history_[-1] if tuner.loss_history_ else float("nan")
    click.echo(f"final trunk loss: {final_loss:.6f}")
    click.echo("layer ranks (merged subspace):")
    for idx, name in enumerate(tuner.backbone_.names, start=1):
        planned = tuner.rank_schedule_.rank_at(idx)
        click.echo(f"  {name}: planned {planned}, merged {tuner.merged_ranks_[name]}")


@cli.command("train-lora")
@_config_option
@_seed_option
@click.option("--kind", type=click.Choice(["content", "style"]), required=True)
@click.option("--reference", "reference_path", required=True, type=click.Path(dir_okay=False))
@click.option("--prompt", required=True)
@click.option("--backbone", "backbone_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_train_lora(config_path, seed, kind, reference_path, prompt, backbone_path, out_path):
    """Train one adapter kind on a single reference image."""
    config = _load_run_config(config_path, seed)
    backbone = ckpt.load_backbone(backbone_path)
    reference = read_pgm(reference_path)
    trainer = LoraTrainer(
        kind,
        rank=config.adapter.rank,
        steps=config.adapter.steps,
        batch_size=config.adapter.batch_size,
        peak_lr=config.adapter.peak_lr,
        start_lr=config.adapter.start_lr,
        floor_lr=config.adapter.floor_lr,
        warmup=config.adapter.warmup,
        routing=default_routing(backbone.names),
        schedule=_schedule_from(config),
        host_hash=ckpt.file_sha256(backbone_path),
        seed=derive_seed(config.seed, "lora", kind),
    )
    trainer.fit(backbone, reference, prompt)
    ckpt.save_adapter(out_path, trainer.adapter_)
    click.echo(f"final {kind} adapter loss: {trainer.loss_history_[-1]:.6f}"
               if trainer.loss_history_ else "adapter saved at initialization")


def _load_adapter_for(backbone_path, adapter_path):
    adapter = ckpt.load_adapter(adapter_path)
    if adapter.host_hash and adapter.host_hash != ckpt.file_sha256(backbone_path):
        raise HostMismatch(
            f"{adapter_path} was trained on a different backbone than {backbone_path}"
        )
    return adapter


@cli.command("sample")
@_config_option
@_seed_option
@click.option("--prompt", required=True)
@click.option("--backbone", "backbone_path", required=True, type=click.Path(dir_okay=False))
@click.option("--content-adapter", "content_path", type=click.Path(dir_okay=False), default=None)
@click.option("--style-adapter", "style_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gamma-c", "gamma_c", type=float, default=None,
              help="Continuous override of the content gain.")
@click.option("--gamma-s", "gamma_s", type=float, default=None,
              help="Continuous override of the style gain.")
@click.option("--symmetric-cfg", is_flag=True,
              help="Ablation: the unconditional pass reuses the conditional weights.")
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
              help="Write per-step diagnostic records to this file.")
@click.option("--encoder", "encoder_path", type=click.Path(dir_okay=False), default=None,
              help="Expert encoder checkpoint for learned gains.")
@click.option("--concept-id", type=int, default=None)
@click.option("--host", type=click.Choice(["rankft", "plain"]), default="rankft",
              show_default=True,
              help="Annotates whether the backbone is rank-limited or plain.")
def cmd_sample(config_path, seed, prompt, backbone_path, content_path, style_path,
               out_path, gamma_c, gamma_s, symmetric_cfg, trace_path, encoder_path,
               concept_id, host):
    """Guided sampling; writes a PGM image and optionally a trace."""
    config = _load_run_config(config_path, seed)
    backbone = ckpt.load_backbone(backbone_path)
    content_adapter = _load_adapter_for(backbone_path, content_path) if content_path else None
    style_adapter = _load_adapter_for(backbone_path, style_path) if style_path else None
    encoder = ckpt.load_encoder(encoder_path) if encoder_path else None
    sampler = GuidedSampler(
        backbone,
        content_adapter=content_adapter,
        style_adapter=style_adapter,
        omega=config.guidance.omega,
        content_window=config.guidance.content_window,
        style_window=config.guidance.style_window,
        alpha_min=config.guidance.alpha_min,
        alpha_max=config.guidance.alpha_max,
        ramp=config.guidance.ramp,
        gamma_content=gamma_c,
        gamma_style=gamma_s,
        encoder=encoder,
        concept_id=concept_id,
        symmetric_cfg=symmetric_cfg,
        schedule=_schedule_from(config),
        record_trace=trace_path is not None,
    )
    image = sampler.sample(prompt, seed=derive_seed(config.seed, "sample"))
    write_pgm(out_path, np.clip(image, 0.0, 1.0))
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(sampler.trace_) + "\n")
    click.echo(f"wrote {out_path} (host={host}, {sampler.n_network_evals_} network evals)")


@cli.command("eval")
@_config_option
@_seed_option
@_threads_option
@click.option("--backbone", "backbone_path", required=True, type=click.Path(dir_okay=False))
@click.option("--content-adapter", "content_path", required=True, type=click.Path(dir_okay=False))
@click.option("--style-adapter", "style_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--n-content", type=int, default=None, help="Content prompts in the grid.")
@click.option("--n-style", type=int, default=None, help="Style prompts in the grid.")
def cmd_eval(config_path, seed, threads, backbone_path, content_path, style_path,
             out_path, n_content, n_style):
    """Generate the prompt grid and report the disentanglement scores."""
    config = _load_run_config(config_path, seed)
    if threads < 1:
        raise ConfigInvalid("--threads must be at least 1")
    n_c = config.dataset.n_content if n_content is None else n_content
    n_s = config.dataset.n_style if n_style is None else n_style
    if not (1 <= n_c <= len(CONTENT_PROMPTS)) or not (2 <= n_s <= len(STYLE_PROMPTS)):
        raise ConfigInvalid("grid sizes out of range (need n_style >= 2 for cross influence)")
    backbone = ckpt.load_backbone(backbone_path)
    content_adapter = _load_adapter_for(backbone_path, content_path)
    style_adapter = _load_adapter_for(backbone_path, style_path)
    report = evaluate_grid(
        backbone,
        content_adapter,
        style_adapter,
        config,
        n_c,
        n_s,
        threads=threads,
    )
    write_report(out_path, report)
    click.echo(
        f"s_c={report.s_c:.4f} s_s={report.s_s:.4f} s_x={report.s_x:.4f} -> {out_path}"
    )


def evaluate_grid(backbone, content_adapter, style_adapter, config, n_content, n_style, threads=1):
    """Full prompt-grid generation plus the three disentanglement scores."""
    from concurrent.futures import ThreadPoolExecutor

    size = config.denoiser.image_size
    schedule = _schedule_from(config)

    def generate(cell):
        i, j = cell
        sampler = GuidedSampler(
            backbone,
            content_adapter=content_adapter,
            style_adapter=style_adapter,
            omega=config.guidance.omega,
            content_window=config.guidance.content_window,
            style_window=config.guidance.style_window,
            alpha_min=config.guidance.alpha_min,
            alpha_max=config.guidance.alpha_max,
            ramp=config.guidance.ramp,
            schedule=schedule,
        )
        prompt = f"{CONTENT_PROMPTS[i]} <c> {STYLE_PROMPTS[j]} <s>"
        return sampler.sample(prompt, seed=derive_seed(config.seed, "eval", i, j))

    cells = [(i, j) for i in range(n_content) for j in range(n_style)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(generate, cells))
    else:
        flat = [generate(c) for c in cells]
    grid = [flat[i * n_style:(i + 1) * n_style] for i in range(n_content)]

    extractor = ImageFeatureExtractor(seed=derive_seed(config.seed, "eval-features"))
    sigma = config.dataset.sigma
    pairs_out = []
    s_c_rows = []
    for i in range(n_content):
        ref = content_render(i, size)
        s_c_rows.append(content_preservation(extractor, grid[i], ref))
    s_s_cols = []
    for j in range(n_style):
        ref = style_render(j, size)
        column = [grid[i][j] for i in range(n_content)]
        s_s_cols.append(style_fidelity(extractor, column, ref, sigma=sigma))
    for i in range(n_content):
        for j in range(n_style):
            pairs_out.append(
                {
                    "content_index": i,
                    "style_index": j,
                    "content_prompt": CONTENT_PROMPTS[i],
                    "style_prompt": STYLE_PROMPTS[j],
                    "content_similarity": s_c_rows[i],
                    "style_similarity": s_s_cols[j],
                }
            )
    s_x = cross_influence(extractor, grid, sigma=sigma)
    return EvalReport(
        s_c=float(np.mean(s_c_rows)),
        s_s=float(np.mean(s_s_cols)),
        s_x=s_x,
        pairs=pairs_out,
        seed=config.seed,
        config_hash=config_hash(config),
    )


@cli.command("inspect")
@click.argument("path", type=click.Path(dir_okay=False))
def cmd_inspect(path):
    """Human-readable checkpoint summary; validates the CRC."""
    summary = ckpt.inspect_checkpoint(path)
    click.echo(f"kind: {summary['kind']} (format v{summary['version']}, crc ok)")
    if summary["kind"] == "adapter":
        click.echo(f"adapter kind: {summary['adapter_kind']}, rank {summary['rank']}")
        click.echo(f"host hash: {summary['host_hash'] or '(unbound)'}")
        routing = summary["routing"]
        click.echo(f"routing content: {', '.join(routing['content'])}")
        click.echo(f"routing style:   {', '.join(routing['style'])}")
        click.echo("routing sets are disjoint")
    click.echo(f"tensors: {len(summary['tensors'])}")
    for name, shape in summary["tensors"]:
        click.echo(f"  {name}: {shape[0]}x{shape[1]}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(USAGE_EXIT)
    except click.ClickException as exc:
        exc.show()
        sys.exit(USAGE_EXIT)
    except click.exceptions.Abort:
        sys.exit(USAGE_EXIT)
    except (ConfigInvalid, MarkerMissing) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(USAGE_EXIT)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(NUMERIC_EXIT)
    except (CorruptCheckpoint, HostMismatch, OSError, json.JSONDecodeError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(DATA_EXIT)
    except CraftLoraError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(USAGE_EXIT)
    return 0


if __name__ == "__main__":
    main()
