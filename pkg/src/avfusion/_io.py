"""Small file helpers: atomic writes, float formatting, run manifests."""

import hashlib
import json
import os
import tempfile

import numpy as np

FLOAT_FMT = ".17g"


def fmt_float(x):
    return format(float(x), FLOAT_FMT)


def fmt_vector(v):
    return "[" + ",".join(format(x, FLOAT_FMT) for x in np.asarray(v, dtype=float).tolist()) + "]"


def atomic_write_text(path, text):
    """Write `text` to `path` via a temp file in the same directory and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def make_manifest(subcommand, config):
    """Reproducibility block embedded in every CLI artifact. Holds no timestamps."""
    from . import __version__

    return {
        "tool": "avfusion",
        "version": __version__,
        "numpy": np.__version__,
        "subcommand": subcommand,
        "config_sha256": hashlib.sha256(canonical_json(config).encode()).hexdigest(),
        "config": config,
    }


def manifest_comment(manifest):
    return "# manifest: " + canonical_json(manifest) + "\n"


def strip_comments(lines):
    return [ln for ln in lines if not ln.startswith("#")]
