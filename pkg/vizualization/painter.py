import numpy as np
import seaborn
from matplotlib import pyplot as plt

from hardirecon.dictionary import sh_matrix
from hardirecon.geometry import fibonacci_sphere

# Grid on which ODF amplitudes are drawn
ODF_GRID_POINTS = 2000


def training_loss(history):
    """Visualize train and validation NMSE during the training
    Args:
        history: list of (epoch, train_nmse, val_nmse, wall_seconds).
    Returns:
        Loss plot
    """

    epochs = np.array([row[0] for row in history])
    train = np.array([row[1] for row in history], dtype=float)
    val = np.array([row[2] for row in history], dtype=float)

    plt.style.use("ggplot")
    plt.figure()
    plt.plot(epochs, train, label="train_nmse")
    # No validation set means every value is nan
    if np.isfinite(val).any():
        plt.plot(epochs, val, label="val_nmse")

    plt.title("Training NMSE")
    plt.xlabel("Epoch #")
    plt.ylabel("NMSE")
    plt.yscale("log")
    plt.legend(loc="upper right")

    return plt


def nmse_boxplot(errors):
    """Distribution of per-voxel NMSE for every method and K_L
    Args:
        errors: dict mapping (method, K_L) to a vector of per-voxel NMSE.
    Returns:
        Box plot
    """

    methods, k_lows, values = [], [], []
    for (method, k), per_voxel in errors.items():
        methods.extend([method] * len(per_voxel))
        k_lows.extend([k] * len(per_voxel))
        values.extend(per_voxel)

    plt.style.use("ggplot")
    plt.figure(figsize=(8, 5))
    order = sorted(set(k_lows), reverse=True)
    seaborn.boxplot(x=k_lows, y=values, hue=methods, order=order, showfliers=False)
    plt.title("Reconstruction NMSE")
    plt.xlabel("K_L")
    plt.ylabel("NMSE")

    return plt


def odf_amplitudes(coeffs, max_order, points=ODF_GRID_POINTS):
    """Evaluates ODF SH coefficients on a whole-sphere grid.

    Returns:
        (grid directions, amplitudes)
    """

    grid = fibonacci_sphere(points)
    return grid, sh_matrix(grid, max_order) @ np.asarray(coeffs, dtype=float)


def odf_maps(truth, reconstructions, max_order, voxel=0):
    """ODF amplitude of one voxel over longitude and latitude, ground truth next to every method
    Args:
        truth: n x J ODF coefficients of the ground truth.
        reconstructions: dict mapping a title to n x J ODF coefficients.
        max_order (int): maximum SH order of the coefficients.
        voxel (int): row to draw.
    Returns:
        ODF plot
    """

    panels = [("ground truth", truth)] + list(reconstructions.items())
    figure, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3), squeeze=False)
    for ax, (title, coeffs) in zip(axes[0], panels):
        grid, amplitude = odf_amplitudes(np.atleast_2d(coeffs)[voxel], max_order)
        longitude = np.degrees(np.arctan2(grid[:, 1], grid[:, 0]))
        latitude = np.degrees(np.arcsin(np.clip(grid[:, 2], -1.0, 1.0)))
        ax.scatter(longitude, latitude, c=amplitude, s=6, cmap="viridis")
        ax.set_title(title)
        ax.set_xlabel("longitude")
        ax.set_ylabel("latitude")
    figure.tight_layout()

    return plt
