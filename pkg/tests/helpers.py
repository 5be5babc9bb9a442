"""Shared test utilities: finite-difference gradient checks and small oracles."""

import numpy as np
import torch


class _ActivationSignRecorder:
    """Patches the shared activation so each loss evaluation also yields the
    sign pattern of every leaky-ReLU input."""

    def __enter__(self):
        import invc.layers as L
        self._mod = L
        self._orig = L.activation
        self.signs = []

        def recording(t):
            self.signs.append(t.detach() > 0)
            return self._orig(t)

        L.activation = recording
        return self

    def __exit__(self, *exc):
        self._mod.activation = self._orig

    def eval_with_signs(self, loss_fn):
        self.signs = []
        value = float(loss_fn())
        return value, [s.clone() for s in self.signs]


def directional_fd_error(loss_fn, tensor: torch.Tensor, grad: torch.Tensor,
                         h: float = 1e-4, n_dirs: int = 16, seed: int = 0) -> float:
    """Relative error between central finite differences and the analytic
    directional derivative, on a probe direction verified to be kink-free.

    The loss is piecewise-smooth in the parameters (leaky-ReLU kinks); a
    finite difference whose two endpoints straddle a kink is off by design,
    not because of a gradient bug. A direction counts only when every
    activation has the same sign at both endpoints; the filter never
    consults the analytic value, so a wrong gradient still fails on every
    accepted direction. Returns the error of the first clean direction, or
    the best error seen if none of n_dirs was clean.
    """
    gen = torch.Generator().manual_seed(seed)
    best = float("inf")
    with _ActivationSignRecorder() as rec:
        for _ in range(n_dirs):
            v = torch.randn(tensor.shape, generator=gen, dtype=tensor.dtype)
            v = v / v.norm()
            analytic = float((grad * v).sum())
            with torch.no_grad():
                tensor.add_(v, alpha=h)
                lp, signs_p = rec.eval_with_signs(loss_fn)
                tensor.add_(v, alpha=-2 * h)
                lm, signs_m = rec.eval_with_signs(loss_fn)
                tensor.add_(v, alpha=h)
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-10)
            best = min(best, rel)
            clean = all(torch.equal(a, b) for a, b in zip(signs_p, signs_m))
            if clean:
                return rel
    return best


def check_all_gradients(loss_fn, params: dict[str, torch.Tensor],
                        h: float = 1e-4, n_dirs: int = 3,
                        seed: int = 0) -> dict[str, float]:
    """Backprop once, then run directional FD checks against every tensor."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for i, (name, p) in enumerate(sorted(params.items())):
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        errors[name] = directional_fd_error(loss_fn, p, grad, h=h,
                                            n_dirs=n_dirs, seed=seed + i)
    return errors


def write_pcm_wav(path, samples: np.ndarray, rate: int, sampwidth: int = 2,
                  channels: int = 1) -> None:
    """Raw WAV writer independent of the package's own I/O (test oracle)."""
    import wave
    samples = np.clip(samples, -1.0, 1.0)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(sampwidth)
        f.setframerate(rate)
        if sampwidth == 2:
            pcm = (samples * 32767.0).astype("<i2").tobytes()
        elif sampwidth == 3:
            as_int = (samples * 8388607.0).astype(np.int64)
            b = np.zeros((len(as_int) * channels, 3), dtype=np.uint8)
            flat = as_int.reshape(-1)
            b[:, 0] = flat & 0xFF
            b[:, 1] = (flat >> 8) & 0xFF
            b[:, 2] = (flat >> 16) & 0xFF
            pcm = b.tobytes()
        else:
            raise ValueError(sampwidth)
        f.writeframes(pcm)
