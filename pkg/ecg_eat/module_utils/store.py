"""Run-directory artifact store.

Every artifact is either a JSON document (sorted keys, reals at 17 significant digits) or an
RFC 4180 CSV table, so two runs with the same configuration write byte-identical files.
"""

import csv
import json
import logging
import shutil
from pathlib import Path

import numpy as np

from ecg_eat.module_utils.errors import ArtifactError, MissingPrerequisite

LOGGER = logging.getLogger(__name__)

MANIFEST = "manifest.json"


# #############################################################################
# ENCODING
# #############################################################################
def format_real(value):
    """Text of a real at 17 significant digits; non-finite values have no JSON form."""
    value = float(value)
    if not np.isfinite(value):
        return None
    text = format(value, ".17g")
    return text if any(c in text for c in ".e") else f"{text}.0"


def dumps_json(data, indent=2):
    """Serialize `data` with sorted keys and fixed-precision reals."""

    def emit(value, level):
        pad, close = " " * (indent * (level + 1)), " " * (indent * level)
        if isinstance(value, dict):
            if not value:
                return "{}"
            items = [f"{pad}{json.dumps(str(k))}: {emit(value[k], level + 1)}" for k in sorted(value, key=str)]
            return "{\n" + ",\n".join(items) + "\n" + close + "}"
        if isinstance(value, np.ndarray):
            value = value.tolist()
        if isinstance(value, (list, tuple)):
            if not value:
                return "[]"
            return "[\n" + ",\n".join(f"{pad}{emit(v, level + 1)}" for v in value) + "\n" + close + "]"
        if isinstance(value, (bool, np.bool_)):
            return "true" if value else "false"
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        if isinstance(value, (float, np.floating)):
            return format_real(value) or "null"
        if value is None or isinstance(value, str):
            return json.dumps(value)
        raise TypeError(f"cannot serialize {type(value).__name__}")

    return emit(data, 0) + "\n"


def write_json(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_json(data), encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"cannot write JSON ({exc.strerror})", path) from exc


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArtifactError("artifact not found", path) from exc
    except ValueError as exc:
        raise ArtifactError(f"malformed JSON ({exc})", path) from exc


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return format_real(value) or ""
    return value


def write_rows(path, header, rows):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise ArtifactError(f"cannot write CSV ({exc.strerror})", path) from exc


def read_rows(path):
    """(header, rows) of a CSV table, every cell as text."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as handle:
            table = list(csv.reader(handle))
    except FileNotFoundError as exc:
        raise ArtifactError("artifact not found", path) from exc
    if not table:
        raise ArtifactError("empty CSV table", path)
    return table[0], table[1:]


# #############################################################################
# STORE
# #############################################################################
class Artifact:
    """Handle on one stored artifact."""

    def __init__(self, path):
        self.path = Path(path)

    @property
    def exists(self):
        return self.path.is_file()

    @property
    def json(self):
        """Parsed JSON document, or None when absent."""
        if not self.exists:
            return None
        return read_json(self.path)

    def __repr__(self):
        return f"Artifact({self.path})"


class ArtifactStore:
    """Map out reads and writes under one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    def _path_builder(self, path):
        """Strip off a leading / so every path stays under the root."""
        path = str(path)
        if path.startswith("/"):
            path = path[1:]
        return self.root / path

    def get(self, path):
        return Artifact(self._path_builder(path))

    def put(self, path, data):
        """Write a JSON document."""
        target = self._path_builder(path)
        write_json(target, data)
        LOGGER.debug("wrote %s", target)
        return Artifact(target)

    def put_rows(self, path, header, rows):
        target = self._path_builder(path)
        write_rows(target, header, rows)
        LOGGER.debug("wrote %s", target)
        return Artifact(target)

    def get_rows(self, path):
        return read_rows(self._path_builder(path))

    def put_matrix(self, path, matrix, header=None):
        matrix = np.asarray(matrix, dtype=np.float64)
        matrix = matrix.reshape(matrix.shape[0], -1)
        header = header or [f"c{j}" for j in range(matrix.shape[1])]
        return self.put_rows(path, header, matrix.tolist())

    def get_matrix(self, path):
        header, rows = self.get_rows(path)
        try:
            return np.array([[float(v) for v in row] for row in rows], dtype=np.float64).reshape(len(rows), len(header))
        except ValueError as exc:
            raise ArtifactError(f"non-numeric cell ({exc})", self._path_builder(path)) from exc

    def put_labeled(self, path, X, y):
        """Feature rows with the label in the last column."""
        X = np.asarray(X, dtype=np.float64).reshape(len(y), -1)
        header = [f"f{j}" for j in range(X.shape[1])] + ["label"]
        return self.put_rows(path, header, [list(row) + [str(label)] for row, label in zip(X.tolist(), y)])

    def get_labeled(self, path):
        _, rows = self.get_rows(path)
        X = np.array([[float(v) for v in row[:-1]] for row in rows], dtype=np.float64)
        return X.reshape(len(rows), -1), np.array([row[-1] for row in rows])

    def put_text(self, path, text):
        target = self._path_builder(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise ArtifactError(f"cannot write text ({exc.strerror})", target) from exc
        return Artifact(target)

    def delete(self, path):
        target = self._path_builder(path)
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()

    def require(self, path, stage):
        """The artifact at `path`, or MissingPrerequisite naming the stage that writes it."""
        artifact = self.get(path)
        if not artifact.exists:
            raise MissingPrerequisite(f"{artifact.path} is missing; run stage '{stage}' first", stage)
        return artifact

    # #########################################################################
    # MANIFEST
    # #########################################################################
    def manifest(self):
        return self.get(MANIFEST).json or {"stages": {}}

    def record_stage(self, stage, outputs, config_digest, seed, elapsed_sec=None, versions=None):
        """Append a stage entry (outputs, configuration digest, seed, wall clock) to the manifest."""
        manifest = self.manifest()
        manifest["stages"][stage] = {
            "outputs": sorted(str(o) for o in outputs),
            "config": config_digest,
            "seed": seed,
            "elapsed_sec": elapsed_sec,
        }
        if versions:
            manifest["versions"] = dict(versions)
        self.put(MANIFEST, manifest)
        return manifest

    def missing_outputs(self):
        """Stage -> listed outputs that no longer exist."""
        missing = {}
        for stage, entry in self.manifest()["stages"].items():
            gone = [path for path in entry["outputs"] if not self.get(path).exists]
            if gone:
                missing[stage] = gone
        return missing
