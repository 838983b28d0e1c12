"""Plain-text model dump, one line per constraint.

Format (``#`` starts a comment)::

    n <n>
    obj <j>:<c_j> ...            linear objective, zeros omitted
    quad <i> <j>:<Q_ij> ...      upper triangle of Q, one line per nonzero row (QPs only)
    eq <k> <j>:<a_j> ... = <b>
    le <k> <j>:<a_j> ... <= <b>
    bound <j> <lo> <up>          every variable, infinities as inf / -inf

Numbers are written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .lp import LinearProgram
from .qp import QuadraticProgram


def _terms(row) -> str:
    return " ".join(f"{j}:{float(row[j])!r}" for j in np.flatnonzero(row))


def dump_model(prob, dest=None) -> str:
    """Write ``prob`` (LP or QP) to ``dest`` (path or text stream); returns the text."""
    out = io.StringIO()
    quad = isinstance(prob, QuadraticProgram)
    c = prob.q if quad else prob.c
    out.write(f"# {'qp' if quad else 'lp'}\n")
    out.write(f"n {c.size}\n")
    out.write(f"obj {_terms(c)}\n")
    if quad:
        for i in range(prob.n):
            row = np.zeros(prob.n)
            row[i:] = prob.Q[i, i:]
            if row.any():
                out.write(f"quad {i} {_terms(row)}\n")
    for k, (a, b) in enumerate(zip(prob.A_eq, prob.b_eq)):
        out.write(f"eq {k} {_terms(a)} = {float(b)!r}\n")
    for k, (a, b) in enumerate(zip(prob.A_in, prob.b_in)):
        out.write(f"le {k} {_terms(a)} <= {float(b)!r}\n")
    for j, (lo, up) in enumerate(zip(prob.lo, prob.up)):
        out.write(f"bound {j} {float(lo)!r} {float(up)!r}\n")
    text = out.getvalue()
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    elif dest is not None:
        dest.write(text)
    return text


def _parse_terms(tokens, n):
    row = np.zeros(n)
    for t in tokens:
        j, v = t.split(":")
        row[int(j)] = float(v)
    return row


def load_model(text: str):
    """Inverse of :func:`dump_model`."""
    n = None
    kind = "lp"
    c = Q = None
    eq, le, lo, up = [], [], {}, {}
    for line in text.splitlines():
        if line.startswith("#"):
            kind = line[1:].strip() or kind
            continue
        if not line.strip():
            continue
        tok = line.split()
        key = tok[0]
        if key == "n":
            n = int(tok[1])
            Q = np.zeros((n, n))
        elif key == "obj":
            c = _parse_terms(tok[1:], n)
        elif key == "quad":
            i = int(tok[1])
            row = _parse_terms(tok[2:], n)
            Q[i, i:] = row[i:]
            Q[i:, i] = row[i:]
        elif key in ("eq", "le"):
            row = _parse_terms(tok[2:-2], n)
            (eq if key == "eq" else le).append((row, float(tok[-1])))
        elif key == "bound":
            lo[int(tok[1])] = float(tok[2])
            up[int(tok[1])] = float(tok[3])
        else:
            raise ValueError(f"unknown record {key!r}")
    A_eq = np.array([r for r, _ in eq]).reshape(len(eq), n)
    A_in = np.array([r for r, _ in le]).reshape(len(le), n)
    args = dict(
        A_eq=A_eq, b_eq=np.array([b for _, b in eq]),
        A_in=A_in, b_in=np.array([b for _, b in le]),
        lo=np.array([lo[j] for j in range(n)]), up=np.array([up[j] for j in range(n)]),
    )
    if kind == "qp":
        return QuadraticProgram(Q, c, **args)
    return LinearProgram(c, **args)
