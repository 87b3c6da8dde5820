"""Command line front end.

  embexport export --manifest data/manifest.csv --image-root data \\
      --out features --families mobilenet_v2,resnet101 --weights pretrained
  embexport verify features/mobilenet_v2.emb1

Exit codes: 0 success, 1 any error (unreadable input, unknown family,
weight download failure, corrupt file), 2 usage.
"""

from __future__ import annotations

import functools

import click

from . import __version__
from .backbones import FAMILIES, WEIGHT_MODES
from .emb1 import Emb1Error, verify_emb1
from .export import ExportError, export_manifest
from .manifest import ManifestError

_CAUGHT = (Emb1Error, ExportError, ManifestError, ValueError, RuntimeError, OSError)


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except _CAUGHT as exc:
            # OSError args start with errno; fall back to the full rendering
            msg = exc.args[0] if exc.args and isinstance(exc.args[0], str) else str(exc)
            raise click.ClickException(msg) from exc

    return wrapper


@click.group()
@click.version_option(__version__, prog_name="embexport")
def main():
    """Export penultimate backbone features to EMB1 files and verify them."""


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(), help="Manifest CSV (id,path,label,patient_id).")
@click.option("--image-root", default=".", show_default=True, type=click.Path(), help="Directory manifest paths are relative to.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory for .emb1 files and sidecars.")
@click.option("--families", default="all", show_default=True, help="Comma-separated family names, or 'all'.")
@click.option("--weights", default="pretrained", show_default=True, type=click.Choice(WEIGHT_MODES), help="Checkpoint source.")
@click.option("--seed", default=0, show_default=True, type=int, help="Init seed when --weights random.")
@click.option("--batch-size", default=8, show_default=True, type=int)
@_guard
def export(manifest_path, image_root, out_dir, families, weights, seed, batch_size):
    """Export features for every manifest image, one file per family."""
    if families == "all":
        chosen = list(FAMILIES)
    else:
        chosen = [f.strip() for f in families.split(",") if f.strip()]
        if not chosen:
            raise click.ClickException("no families selected")
    results = export_manifest(
        manifest_path, image_root, out_dir, chosen,
        weights=weights, seed=seed, batch_size=batch_size,
    )
    for r in results:
        click.echo(f"{r.family}: {r.count} x {r.dim} -> {r.path} sha256={r.sha256[:16]}")


@main.command()
@click.argument("files", nargs=-1, required=True, type=click.Path())
@click.option("--sha256", "expect", default=None, help="Expected digest; defaults to the sidecar's.")
@_guard
def verify(files, expect):
    """Validate structure and checksum of EMB1 files."""
    for path in files:
        summary = verify_emb1(path, expect_sha256=expect)
        click.echo(
            f"OK {path}: count={summary['count']} dim={summary['dim']} "
            f"sha256={summary['sha256'][:16]}"
        )


if __name__ == "__main__":
    main()
