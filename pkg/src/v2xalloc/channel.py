"""Large- and small-scale propagation models.

V2I links use the macro-cell law 128.1 + 37.6 log10(d_km); V2V links use the
Manhattan-grid LOS/NLOS law from WINNER+ B1 with a 7 m street-width LOS test.
All gains are returned in dB; linear conversion happens in the environment.
"""
import numpy as np

SPEED_OF_LIGHT = 3e8


def db_to_linear(x):
    return np.power(10.0, np.asarray(x, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


def v2i_pathloss_db(pos, bs_pos, h_bs=25.0, h_ms=1.5):
    """Path loss (dB) from ground positions ``pos`` (n, 2) to the base station."""
    pos = np.atleast_2d(pos)
    d2d = np.hypot(pos[:, 0] - bs_pos[0], pos[:, 1] - bs_pos[1])
    d3d = np.sqrt(d2d**2 + (h_bs - h_ms) ** 2)
    return 128.1 + 37.6 * np.log10(d3d / 1000.0)


def _los_db(d, fc_ghz, h_bs, h_ms):
    d_bp = 4 * (h_bs - 1) * (h_ms - 1) * fc_ghz * 1e9 / SPEED_OF_LIGHT
    d = np.maximum(d, 3.0)
    near = 22.7 * np.log10(d) + 41 + 20 * np.log10(fc_ghz / 5)
    far = (
        40.0 * np.log10(d)
        + 9.45
        - 17.3 * np.log10(h_bs)
        - 17.3 * np.log10(h_ms)
        + 2.7 * np.log10(fc_ghz / 5)
    )
    return np.where(d < d_bp, near, far)


def _nlos_db(d_a, d_b, fc_ghz, h_bs, h_ms):
    n_j = np.maximum(2.8 - 0.0024 * d_b, 1.84)
    d_b = np.maximum(d_b, 1e-3)
    return _los_db(d_a, fc_ghz, h_bs, h_ms) + 20 - 12.5 * n_j + 10 * n_j * np.log10(d_b) + 3 * np.log10(fc_ghz / 5)


def v2v_pathloss_db(pos_a, pos_b, fc_ghz=2.0, h=1.5, street_width=7.0):
    """Pairwise V2V path loss (dB) between ``pos_a`` (n, 2) and ``pos_b`` (k, 2).

    Returns ``(pathloss, los)`` with shapes (n, k).
    """
    pos_a = np.atleast_2d(pos_a)
    pos_b = np.atleast_2d(pos_b)
    dx = np.abs(pos_a[:, None, 0] - pos_b[None, :, 0])
    dy = np.abs(pos_a[:, None, 1] - pos_b[None, :, 1])
    d = np.hypot(dx, dy) + 1e-3
    los = np.minimum(dx, dy) < street_width
    nlos = np.minimum(_nlos_db(dx, dy, fc_ghz, h, h), _nlos_db(dy, dx, fc_ghz, h, h))
    return np.where(los, _los_db(d, fc_ghz, h, h), nlos), los


def rayleigh_power(rng, size):
    """Unit-mean Rayleigh fading power gains (linear)."""
    return rng.exponential(1.0, size=size)
