from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import mean_absolute_error, mean_squared_error

from utils import ShapeMismatchError

SSIM_WINDOW_SIZE = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0],
                        [-2.0, 0.0, 2.0],
                        [-1.0, 0.0, 1.0]], dtype=torch.float64)
SOBEL_Y = SOBEL_X.T.contiguous()


def _as_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _check_shapes(pred, target):
    if tuple(pred.shape) != tuple(target.shape):
        raise ShapeMismatchError(f"prediction has shape {list(pred.shape)}, target has shape {list(target.shape)}")


def mae(pred, target):
    _check_shapes(pred, target)
    return float(mean_absolute_error(_as_numpy(target).reshape(-1), _as_numpy(pred).reshape(-1)))


def rmse(pred, target):
    _check_shapes(pred, target)
    return float(np.sqrt(mean_squared_error(_as_numpy(target).reshape(-1), _as_numpy(pred).reshape(-1))))


def gaussian_window(size=SSIM_WINDOW_SIZE, sigma=SSIM_SIGMA):
    """ Normalized 2D Gaussian window of shape [size, size] (float64). """
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    kernel_1d = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    kernel_1d /= kernel_1d.sum()
    return torch.outer(kernel_1d, kernel_1d)


def _as_image(x):
    """ [H, W] or [1, H, W] -> float64 [1, 1, H, W] """
    x = torch.as_tensor(x).detach().to(torch.float64)
    while x.dim() > 2 and x.shape[0] == 1:
        x = x[0]
    if x.dim() != 2:
        raise ShapeMismatchError(f"expected a single 2D map, got shape {list(x.shape)}")
    return x[None, None]


def ssim(x, y, data_range=1.0):
    """ Mean structural similarity over all valid 11x11 Gaussian windows (no padding) of two maps in [0, data_range].
    """
    _check_shapes(x, y)
    x, y = _as_image(x), _as_image(y)
    if min(x.shape[-2:]) < SSIM_WINDOW_SIZE:
        raise ShapeMismatchError(f"SSIM needs maps of at least {SSIM_WINDOW_SIZE}x{SSIM_WINDOW_SIZE}, "
                                 f"got {list(x.shape[-2:])}")

    window = gaussian_window()[None, None]
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2

    mu_x, mu_y = F.conv2d(x, window), F.conv2d(y, window)
    # x * x instead of x ** 2 keeps ssim(x, x) exactly 1
    sigma_xx = F.conv2d(x * x, window) - mu_x * mu_x
    sigma_yy = F.conv2d(y * y, window) - mu_y * mu_y
    sigma_xy = F.conv2d(x * y, window) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / \
               ((mu_x * mu_x + mu_y * mu_y + c1) * (sigma_xx + sigma_yy + c2))
    return float(ssim_map.mean())


def spatial_information(vel):
    """ Mean Sobel gradient magnitude sqrt(Gx^2 + Gy^2) over the interior pixels of a 2D map. """
    img = _as_image(vel)
    if min(img.shape[-2:]) < 3:
        raise ShapeMismatchError(f"spatial information needs a map of at least 3x3, got {list(img.shape[-2:])}")
    grad_x = F.conv2d(img, SOBEL_X[None, None])
    grad_y = F.conv2d(img, SOBEL_Y[None, None])
    return float(torch.sqrt(grad_x * grad_x + grad_y * grad_y).mean())


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    ssim: float
    n_samples: int
    per_sample: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {"mae": self.mae, "rmse": self.rmse, "ssim": self.ssim, "n_samples": self.n_samples}


def report_from_maps(preds, targets):
    """ Per-sample MAE and RMSE on [-1, 1] maps and SSIM on maps rescaled to [0, 1], averaged over samples.

        `preds` and `targets` are [N, 1, V, V] (or [N, V, V]) tensors. """
    _check_shapes(preds, targets)
    if preds.shape[0] == 0:
        raise ValueError("cannot compute metrics over an empty set")

    per_sample = {"mae": [], "rmse": [], "ssim": []}
    for pred, target in zip(preds, targets):
        per_sample["mae"].append(mae(pred, target))
        per_sample["rmse"].append(rmse(pred, target))
        per_sample["ssim"].append(ssim((pred + 1) / 2, (target + 1) / 2))

    return MetricsReport(mae=float(np.mean(per_sample["mae"])),
                         rmse=float(np.mean(per_sample["rmse"])),
                         ssim=float(np.mean(per_sample["ssim"])),
                         n_samples=int(preds.shape[0]),
                         per_sample={k: np.array(v) for k, v in per_sample.items()})
