import ast
import logging
from functools import lru_cache
from typing import Callable, Dict, Sequence, Tuple

import numpy as np

from errors import ConfigError

logger = logging.getLogger(__name__)

ALLOWED_FUNCTIONS = {
    'sin': np.sin,
    'cos': np.cos,
    'exp': np.exp,
    'sqrt': np.sqrt,
}

ALLOWED_CONSTANTS = {'pi': np.pi}

BINARY_OPERATORS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

UNARY_OPERATORS = {
    ast.UAdd: np.positive,
    ast.USub: np.negative,
}

Evaluator = Callable[[Dict[str, np.ndarray]], np.ndarray]


def variable_names(dim_slow: int, dim_fast: int) -> Tuple[str, ...]:
    return tuple([f"x{i + 1}" for i in range(dim_slow)] + [f"y{j + 1}" for j in range(dim_fast)])


def _compile_node(node: ast.AST, names: frozenset, field: str) -> Evaluator:
    if isinstance(node, ast.Expression):
        return _compile_node(node.body, names, field)

    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ConfigError(field, f"unsupported constant {node.value!r}")
        value = float(node.value)
        return lambda env: value

    if isinstance(node, ast.Name):
        if node.id in names:
            key = node.id
            return lambda env: env[key]
        if node.id in ALLOWED_CONSTANTS:
            value = ALLOWED_CONSTANTS[node.id]
            return lambda env: value
        raise ConfigError(field, f"unknown name '{node.id}' (allowed: {', '.join(sorted(names))}, pi)")

    if isinstance(node, ast.BinOp):
        op = BINARY_OPERATORS.get(type(node.op))
        if op is None:
            raise ConfigError(field, f"operator {type(node.op).__name__} is not allowed")
        left = _compile_node(node.left, names, field)
        right = _compile_node(node.right, names, field)
        return lambda env: op(left(env), right(env))

    if isinstance(node, ast.UnaryOp):
        op = UNARY_OPERATORS.get(type(node.op))
        if op is None:
            raise ConfigError(field, f"operator {type(node.op).__name__} is not allowed")
        operand = _compile_node(node.operand, names, field)
        return lambda env: op(operand(env))

    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in ALLOWED_FUNCTIONS:
            raise ConfigError(field, f"only {', '.join(sorted(ALLOWED_FUNCTIONS))} may be called")
        if len(node.args) != 1 or node.keywords:
            raise ConfigError(field, f"{node.func.id} takes exactly one argument")
        func = ALLOWED_FUNCTIONS[node.func.id]
        arg = _compile_node(node.args[0], names, field)
        return lambda env: func(arg(env))

    raise ConfigError(field, f"unsupported syntax {type(node).__name__}")


@lru_cache(maxsize=512)
def compile_expression(text: str, names: Tuple[str, ...], field: str = 'expression') -> Evaluator:
    """Compile a closed-form expression into a vectorised evaluator.

    The evaluator takes a mapping from variable name to a 1-d array and
    returns an array of the same length (constants are broadcast).
    """
    if not isinstance(text, str) or not text.strip():
        raise ConfigError(field, "expression must be a non-empty string")
    try:
        tree = ast.parse(text.strip(), mode='eval')
    except SyntaxError as e:
        raise ConfigError(field, f"cannot parse '{text}': {e.msg}")
    inner = _compile_node(tree, frozenset(names), field)

    def evaluate(env: Dict[str, np.ndarray]) -> np.ndarray:
        n = len(next(iter(env.values()))) if env else 1
        with np.errstate(all='ignore'):
            return np.broadcast_to(np.asarray(inner(env), dtype=float), (n,)).copy()

    return evaluate


def _environment(x: np.ndarray, y: np.ndarray) -> Dict[str, np.ndarray]:
    env = {f"x{i + 1}": x[:, i] for i in range(x.shape[1])}
    env.update({f"y{j + 1}": y[:, j] for j in range(y.shape[1])})
    return env


def compile_vector_field(exprs: Sequence[str], dim_slow: int, dim_fast: int, field: str):
    """Compile a list of component expressions into f(x, y) -> (n, len(exprs))."""
    names = variable_names(dim_slow, dim_fast)
    parts = [compile_expression(e, names, f"{field}[{k}]") for k, e in enumerate(exprs)]

    def vector_field(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        env = _environment(x, y)
        return np.stack([p(env) for p in parts], axis=1)

    return vector_field


def compile_matrix_field(rows: Sequence[Sequence[str]], dim_slow: int, dim_fast: int, field: str):
    """Compile a square matrix of expressions into C(x, y) -> (n, l, l)."""
    names = variable_names(dim_slow, dim_fast)
    if len(rows) != dim_fast or any(len(r) != dim_fast for r in rows):
        raise ConfigError(field, f"expected a {dim_fast}x{dim_fast} matrix of expressions")
    parts = [[compile_expression(e, names, f"{field}[{i}][{j}]") for j, e in enumerate(row)]
             for i, row in enumerate(rows)]

    def matrix_field(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        env = _environment(x, y)
        return np.stack([np.stack([p(env) for p in row], axis=1) for row in parts], axis=1)

    return matrix_field


def compile_time_function(exprs: Sequence[str], field: str):
    """Compile path components written in the variable t into t -> (n, d)."""
    parts = [compile_expression(e, ('t',), f"{field}[{k}]") for k, e in enumerate(exprs)]

    def path_function(t: np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([p({'t': t}) for p in parts], axis=1)

    return path_function
