"""Running input normalisation (Welford) and Pop-Art target normalisation."""
from __future__ import annotations

import numpy as np

STD_FLOOR = 1e-6
POPART_SIGMA_FLOOR = 1e-4


class RunningStats:
    """Per-dimension streaming mean and sum of squared deviations."""

    def __init__(self, dim=1):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x):
        x = np.asarray(x, dtype=float).reshape(self.mean.shape)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)
        return self

    def update_batch(self, xs):
        """Fold rows of ``xs`` in one at a time (same arithmetic as :meth:`update`)."""
        for x in np.asarray(xs, dtype=float).reshape(-1, self.mean.shape[0]):
            self.update(x)
        return self

    @property
    def variance(self):
        if self.count == 0:
            return np.zeros_like(self.m2)
        return self.m2 / self.count

    @property
    def std(self):
        return np.sqrt(self.variance)

    def normalize(self, x):
        if self.count < 2:
            return np.asarray(x, dtype=float) - self.mean
        return (np.asarray(x, dtype=float) - self.mean) / np.maximum(self.std, STD_FLOOR)

    def copy(self):
        out = RunningStats(self.mean.shape[0])
        out.count, out.mean, out.m2 = self.count, self.mean.copy(), self.m2.copy()
        return out

    def to_arrays(self, prefix):
        return {f"{prefix}.count": np.array([self.count], dtype=float),
                f"{prefix}.mean": self.mean, f"{prefix}.m2": self.m2}

    @classmethod
    def from_arrays(cls, named, prefix):
        mean = np.asarray(named[f"{prefix}.mean"], dtype=float)
        out = cls(mean.shape[0])
        out.count = int(round(float(named[f"{prefix}.count"][0])))
        out.mean = mean.copy()
        out.m2 = np.asarray(named[f"{prefix}.m2"], dtype=float).copy()
        return out


def welford_update(stats, x):
    return stats.copy().update(x)


def welford_normalize(stats, x):
    return stats.normalize(x)


def art_rescale(W, b, mu_old, sigma_old, mu_new, sigma_new):
    """Rescale a linear output layer in place so ``sigma * f(x) + mu`` is unchanged."""
    if mu_old == mu_new and sigma_old == sigma_new:
        return
    W.data = W.data * (sigma_old / sigma_new)
    b.data = (sigma_old * b.data + mu_old - mu_new) / sigma_new


class PopArtHead:
    """Adaptive target statistics coupled to one or more linear output layers.

    Every layer in ``layers`` (``(W, b)`` pairs) is rescaled whenever the
    statistics move, so unnormalised predictions are preserved exactly.
    """

    def __init__(self, layers=(), ema_rate=3e-4, mu=0.0, nu=1.0):
        if not 0.0 < ema_rate < 1.0:
            raise ValueError(f"ema_rate must be in (0, 1), got {ema_rate}")
        self.layers = list(layers)
        self.ema_rate = ema_rate
        self.mu = float(mu)
        self.nu = float(nu)  # running second moment

    @property
    def sigma(self):
        return float(np.sqrt(max(self.nu - self.mu ** 2, POPART_SIGMA_FLOOR ** 2)))

    def set_stats(self, mu, sigma):
        """Move the statistics to ``(mu, sigma)``, preserving outputs."""
        sigma = max(float(sigma), POPART_SIGMA_FLOOR)
        mu_old, sigma_old = self.mu, self.sigma
        self.mu = float(mu)
        self.nu = sigma ** 2 + self.mu ** 2
        sigma_new = self.sigma
        for W, b in self.layers:
            art_rescale(W, b, mu_old, sigma_old, self.mu, sigma_new)
        return self

    def update(self, targets):
        targets = np.asarray(targets, dtype=float)
        beta = self.ema_rate
        mu_old, sigma_old = self.mu, self.sigma
        self.mu = (1.0 - beta) * self.mu + beta * float(targets.mean())
        self.nu = (1.0 - beta) * self.nu + beta * float(np.mean(targets ** 2))
        sigma_new = self.sigma
        for W, b in self.layers:
            art_rescale(W, b, mu_old, sigma_old, self.mu, sigma_new)
        return self

    def normalize(self, y):
        return (np.asarray(y, dtype=float) - self.mu) / self.sigma

    def denormalize(self, y):
        return self.sigma * np.asarray(y, dtype=float) + self.mu

    def to_arrays(self, prefix):
        # sigma rather than the second moment: nu - mu**2 cancels badly in float32
        return {f"{prefix}.mu": np.array([self.mu]), f"{prefix}.sigma": np.array([self.sigma])}

    def load_arrays(self, named, prefix):
        self.mu = float(named[f"{prefix}.mu"][0])
        sigma = float(named[f"{prefix}.sigma"][0])
        self.nu = sigma ** 2 + self.mu ** 2


def popart_update(head, batch_targets):
    return head.update(batch_targets)
