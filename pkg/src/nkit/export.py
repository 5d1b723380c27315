# Copyright (c) 2026 The nkit developers
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in
# all copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.

"""Result files: grid binaries with JSON sidecars, coordinate matrix dumps,
CSV tables and JSON documents.

Text output is deterministic: floats are written with ``repr`` and JSON keys
are sorted, so two sequential runs produce identical bytes.
"""

import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence, Tuple, Union

import numpy as np

from .elliptic_op import DiscreteOperator
from .grid_core import CoefficientField, ScalarField, make_domain
from .neumann_fn import NeumannColumn

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
SIDECAR_SUFFIX = ".json"


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + SIDECAR_SUFFIX)


def _plain(value: Any) -> Any:
    """JSON compatible copy: numpy scalars and arrays become Python
    objects, complex numbers become [re, im] and non-finite floats None."""
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return _plain(value.item())
    if isinstance(value, complex):
        return [_plain(value.real), _plain(value.imag)]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path: PathLike, obj: Any) -> Path:
    path = Path(path)
    path.write_text(dumps(obj), encoding="utf-8")
    logger.debug("Wrote %s", path)
    return path


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: PathLike, header: Sequence[str],
              rows: Iterable[Sequence[Any]]) -> Path:
    """One header row naming columns and units, then the data rows."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        count = 0
        for row in rows:
            if len(row) != len(header):
                raise ValueError("Row {} has {} cells, header has {}".format(
                    count, len(row), len(header)))
            writer.writerow([_cell(value) for value in row])
            count += 1
    logger.debug("Wrote %d rows to %s", count, path)
    return path


def write_field(path: PathLike, field: Union[ScalarField, CoefficientField],
                **metadata) -> Tuple[Path, Path]:
    """Flat little endian float64 binary plus a JSON sidecar.

    Complex fields are stored with real and imaginary parts interleaved.
    """
    path = Path(path)
    domain = field.domain
    values = np.asarray(field.values).ravel()
    if np.iscomplexobj(values):
        kind = "complex"
        data = np.empty(2 * values.size, dtype="<f8")
        data[0::2] = values.real
        data[1::2] = values.imag
    else:
        kind = "real"
        data = values.astype("<f8")
    path.write_bytes(data.tobytes())
    sidecar = dict(metadata)
    sidecar.update({"n": domain.n, "extent": list(domain.extent),
                    "kind": kind})
    if isinstance(field, CoefficientField):
        sidecar.setdefault("spec", field.spec_dict())
    write_json(_sidecar(path), sidecar)
    return path, _sidecar(path)


def read_field(path: PathLike) -> Union[ScalarField, np.ndarray]:
    """Inverse of :func:`write_field`: a ScalarField for complex data, the
    node array for real data."""
    path = Path(path)
    sidecar: Dict[str, Any] = json.loads(
        _sidecar(path).read_text(encoding="utf-8"))
    domain = make_domain(sidecar["extent"], sidecar["n"])
    data = np.frombuffer(path.read_bytes(), dtype="<f8")
    kind = sidecar["kind"]
    expected = domain.size * (2 if kind == "complex" else 1)
    if data.size != expected:
        raise ValueError("{} holds {} values, its sidecar announces "
                         "{}".format(path, data.size, expected))
    if kind == "complex":
        return ScalarField(domain, data[0::2] + 1j * data[1::2])
    return data.reshape(domain.shape).copy()


def write_column(path: PathLike, column: NeumannColumn) -> Tuple[Path, Path]:
    return write_field(path, column.field, y=list(column.y), k=column.k,
                       eps_mol=column.eps_mol,
                       residual=column.report.residual,
                       iterations=column.report.iterations,
                       adjoint=column.adjoint,
                       gamma=column.gamma.spec_dict())


def write_matrix(path: PathLike, operator: DiscreteOperator) -> Path:
    """One ``row col re im`` line per stored entry, 0-based."""
    path = Path(path)
    matrix = operator.matrix.tocoo()
    order = np.lexsort((matrix.col, matrix.row))
    with path.open("w", encoding="utf-8") as handle:
        for index in order:
            value = complex(matrix.data[index])
            handle.write("{} {} {!r} {!r}\n".format(
                int(matrix.row[index]), int(matrix.col[index]),
                value.real, value.imag))
    logger.info("Wrote %d matrix entries to %s", matrix.nnz, path)
    return path
