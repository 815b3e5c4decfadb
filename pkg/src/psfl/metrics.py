"""Image-quality metrics, accuracy, and the frozen linear probe used for evaluation."""
import math

import numpy as np

from .autodiff import Tensor, cross_entropy, gradients, linear, one_hot, softmax
from .errors import ContractError, UndefinedMetricError

PSNR_INF = math.inf


def _pair(m, m_hat):
    m = np.asarray(m, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    if m.shape != m_hat.shape:
        raise ContractError(f"image shapes differ: {m.shape} vs {m_hat.shape}")
    return m, m_hat


def psnr(m, m_hat, max_value=1.0):
    """``10 log10(MAX^2 / MSE)``; identical images give ``math.inf``."""
    if max_value <= 0:
        raise ContractError("max_value must be positive")
    m, m_hat = _pair(m, m_hat)
    err = float(((m - m_hat) ** 2).mean())
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(max_value * max_value / err)


def ssim(m, m_hat, max_value=1.0, c1=None, c2=None):
    """Single-window SSIM computed from global image statistics.

    ``c1`` and ``c2`` default to ``(0.01 * max_value)**2`` and
    ``(0.03 * max_value)**2``.
    """
    m, m_hat = _pair(m, m_hat)
    c1 = (0.01 * max_value) ** 2 if c1 is None else c1
    c2 = (0.03 * max_value) ** 2 if c2 is None else c2
    if c1 <= 0 or c2 <= 0:
        raise ContractError("c1 and c2 must be positive")
    if np.array_equal(m, m_hat):
        return 1.0
    mu_a, mu_b = m.mean(), m_hat.mean()
    da, db = m - mu_a, m_hat - mu_b
    var_a, var_b = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(num / den)


def accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError("predictions and labels differ in length")
    if labels.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float((predictions == labels).mean())


def batch_psnr(m, m_hat, max_value=1.0):
    """Mean per-image PSNR; infinite if any image is reconstructed exactly."""
    return float(np.mean([psnr(a, b, max_value) for a, b in zip(m, m_hat)]))


def batch_ssim(m, m_hat, max_value=1.0):
    return float(np.mean([ssim(a, b, max_value) for a, b in zip(m, m_hat)]))


class LinearProbe:
    """Softmax regression on raw pixels, trained once and then frozen.

    It stands in for a pretrained evaluation classifier: reconstructions
    are scored by how often the probe recovers their true label.
    """

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    @classmethod
    def fit(cls, images, labels, classes, steps=300, lr=0.5, l2=1e-4):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        y = one_hot(labels, classes)
        W = Tensor(np.zeros((x.shape[1], classes)), requires_grad=True)
        b = Tensor(np.zeros(classes), requires_grad=True)
        xt = Tensor(x)
        for _ in range(steps):
            loss = cross_entropy(y, softmax(linear(xt, W, b)))
            g = gradients(loss, {"W": W, "b": b})
            W.data = W.data - lr * (g["W"] + l2 * W.data)
            b.data = b.data - lr * g["b"]
        return cls(W.data, b.data)

    def predict_proba(self, images):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        z = x @ self.weight + self.bias
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, images):
        return self.predict_proba(images).argmax(axis=1)

    def score(self, images, labels):
        return accuracy(self.predict(images), labels)
