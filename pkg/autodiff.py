""" Validating entry points to torch's reverse-mode autograd.

    Tensors are `torch.Tensor`s, parameters are `torch.nn.Parameter`s reached by name through `named_parameters()`
    and the tape is the graph autograd records during a forward pass (released once backward has run). The functions
    here add the checks the rest of the stack relies on: restricted broadcasting, a single dtype per graph, scalar
    losses, and a central finite-difference oracle used by the tests of every backward rule. """
import torch

from utils import ShapeMismatchError, GraphError

SUPPORTED_DTYPES = (torch.float32, torch.float64)


def _neg(a, _b):
    return torch.neg(a)


def _abs(a, _b):
    # torch's d|x|/dx is sign(x), i.e. 0 at exactly x = 0
    return torch.abs(a)


def _sign(a, _b):
    return torch.sign(a)


def _log1p(a, _b):
    return torch.log1p(a)


def _scale(a, b):
    if isinstance(b, torch.Tensor):
        raise TypeError("scale-by-constant expects a Python number as its second operand")
    return a * b


ELEMENTWISE_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "neg": _neg,
    "abs": _abs,
    "sign": _sign,
    "log1p": _log1p,
    "scale": _scale
}
UNARY_OPS = {"neg", "abs", "sign", "log1p"}


def _is_scalar(value):
    return not isinstance(value, torch.Tensor) or value.dim() == 0


def check_dtypes(*tensors):
    dtypes = {t.dtype for t in tensors if isinstance(t, torch.Tensor)}
    unsupported = dtypes.difference(SUPPORTED_DTYPES)
    if unsupported:
        raise TypeError(f"unsupported dtype(s) {sorted(map(str, unsupported))}, expected float32 or float64")
    if len(dtypes) > 1:
        raise TypeError(f"mixed precision in one graph: {sorted(map(str, dtypes))}")


def elementwise(op, a, b=None):
    """ Applies `op` (one of ELEMENTWISE_OPS) to `a` and, for binary ops, `b`.

        Only scalar-vs-tensor and identical-shape operands are accepted. """
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"Unsupported elementwise op '{op}', expected one of {list(ELEMENTWISE_OPS)}")

    if op not in UNARY_OPS:
        if b is None:
            raise ValueError(f"'{op}' needs a second operand")
        if not _is_scalar(a) and not _is_scalar(b) and a.shape != b.shape:
            raise ShapeMismatchError(f"'{op}' got shapes {list(a.shape)} and {list(b.shape)}; only identical shapes "
                                     f"or a scalar operand are supported")
    check_dtypes(a, b)
    return ELEMENTWISE_OPS[op](a, b)


def matmul(a, b):
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeMismatchError(f"matmul expects two matrices, got shapes {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    check_dtypes(a, b)
    return a @ b


def backward(loss, named_leaves):
    """ Returns {name: dLoss/dLeaf} for every leaf in `named_leaves` (a dict or an iterable of (name, tensor) pairs,
        e.g. `model.named_parameters()`) that requires grad.

        The leaves' `.grad` attributes are left untouched. A leaf that does not influence the loss gets a zero
        gradient; a leaf used several times gets the sum of its contributions. """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = list(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise GraphError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise GraphError("loss is detached from the graph (no leaf that requires grad contributed to it)")

    items = named_leaves.items() if isinstance(named_leaves, dict) else named_leaves
    names, leaves = [], []
    for name, leaf in items:
        if leaf.requires_grad:
            names.append(name)
            leaves.append(leaf)

    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    return {
        name: torch.zeros_like(leaf) if grad is None else grad
        for name, leaf, grad in zip(names, leaves, grads)
    }


def finite_difference_check(f, x, h=1e-5, eps=1e-12):
    """ Max over elements of |analytic - central difference| / (|analytic| + eps) for scalar-valued `f` at `x`.

        `x` should be float64; it is not modified. """
    x = x.detach().clone()
    x_leaf = x.clone().requires_grad_(True)
    analytic = backward(f(x_leaf), {"x": x_leaf})["x"].detach().reshape(-1)

    numeric = torch.empty_like(analytic)
    flat = x.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(f(x))
            flat[i] = orig - h
            f_minus = float(f(x))
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * h)

    return float(torch.max(torch.abs(analytic - numeric) / (torch.abs(analytic) + eps)))
