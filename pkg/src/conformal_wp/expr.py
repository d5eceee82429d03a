"""Tiny arithmetic expression language for scenario fields.

Grammar: numbers, ``x1 .. xn``, ``r2`` (= |x|^2), ``pi``, ``+ - * / **``,
unary minus, parentheses and the functions ``sin cos exp log sqrt``.
Expressions are parsed with :mod:`ast` and evaluated over numpy arrays; no
names or calls outside the whitelist are accepted.
"""

from __future__ import annotations

import ast
import math
import re
from typing import Callable

import numpy as np

FUNCTIONS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_COORD = re.compile(r"x([1-9][0-9]*)$")


class ExpressionError(ValueError):
    pass


def _check(node: ast.AST, dim: int) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, dim)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ExpressionError(f"unsupported constant {node.value!r}")
    elif isinstance(node, ast.Name):
        m = _COORD.match(node.id)
        if m:
            if not 1 <= int(m.group(1)) <= dim:
                raise ExpressionError(f"coordinate {node.id} out of range for dimension {dim}")
        elif node.id not in ("pi", "r2"):
            raise ExpressionError(f"unknown name {node.id!r}")
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        _check(node.left, dim)
        _check(node.right, dim)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError("only unary + and - are allowed")
        _check(node.operand, dim)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
            raise ExpressionError("only sin, cos, exp, log and sqrt may be called")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument")
        _check(node.args[0], dim)
    else:
        raise ExpressionError(f"unsupported syntax {type(node).__name__}")


def parse_expression(text: str, dim: int) -> ast.Expression:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    _check(tree, dim)
    return tree


def _eval(node: ast.AST, env: dict):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        val = _eval(node.operand, env)
        return -val if isinstance(node.op, ast.USub) else val
    return FUNCTIONS[node.func.id](_eval(node.args[0], env))


def evaluate_expression(text: str, coords: list[np.ndarray]) -> np.ndarray:
    """Evaluate ``text`` on broadcastable coordinate arrays; result has their broadcast shape."""
    dim = len(coords)
    tree = parse_expression(text, dim)
    env = {f"x{k + 1}": c for k, c in enumerate(coords)}
    env["pi"] = math.pi
    env["r2"] = sum(c * c for c in coords)
    shape = np.broadcast_shapes(*(c.shape for c in coords))
    with np.errstate(all="ignore"):
        out = np.broadcast_to(np.asarray(_eval(tree, env), dtype=float), shape)
    if not np.all(np.isfinite(out)):
        raise ExpressionError(f"expression {text!r} is not finite on the grid")
    return np.array(out)
