"""Central finite-difference validation of analytic gradients."""
import numpy as np

from .ops import trace_pool_argmax
from .tensor import GradientError, backward, no_grad


class SmoothedCrossEntropyHead:
    """Label-smoothed cross-entropy on [B, N_c] logits, plus an accurate
    ``loss(a) - loss(b)``.

    Near uniform logits the loss sits close to ``ln N_c`` and two nearby
    values share most of their bits; subtracting them directly leaves one
    ulp of that magnitude as noise.  :meth:`difference` forms the same
    difference from the logit differences instead.
    """

    def __init__(self, labels, smoothing=0.0):
        self.labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        self.smoothing = float(smoothing)

    def targets(self, nc):
        y = np.full((len(self.labels), nc), self.smoothing / nc)
        y[np.arange(len(self.labels)), self.labels] += 1.0 - self.smoothing
        return y

    def __call__(self, logits):
        from .ops import log_softmax, mean, mul, reshape, scale, sum
        from .tensor import Tensor

        lg = logits if logits.ndim == 2 else reshape(logits, (1,) + logits.shape)
        per = sum(mul(log_softmax(lg), Tensor(self.targets(lg.shape[-1]))), axis=-1)
        return scale(mean(per), -1.0)

    def difference(self, a, b):
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        d = a - b
        c = np.maximum(a.max(axis=1), b.max(axis=1))[:, None]
        eb = np.exp(b - c)
        # lse(a) - lse(b) = log1p(sum(e^b * expm1(a - b)) / sum(e^b))
        dlse = np.log1p((eb * np.expm1(d)).sum(axis=1) / eb.sum(axis=1))
        y = self.targets(a.shape[1])
        return float(np.mean(dlse - (y * d).sum(axis=1)))


def _evaluate(fn, head):
    with no_grad(), trace_pool_argmax() as trace:
        out = fn()
        val = out.data if head is None else head(out).data
    v = float(np.asarray(val))
    if not np.isfinite(v):
        raise GradientError(f"function value is not finite: {v}")
    return v, np.array(out.data, copy=True), trace.hexdigest()


def grad_check(fn, params, eps=1e-5, max_entries=None, seed=0, report=None, skipped=None, head=None):
    """Worst relative error between analytic and numeric gradients.

    ``fn`` takes no arguments and must read the *current* values of
    ``params``; entries are perturbed in place and restored.  It returns the
    scalar to check, or, when ``head`` is given, the input of ``head`` (the
    scalar is then ``head(fn())`` and ``head.difference`` supplies the
    numerator of the central difference).  With ``max_entries`` only that
    many randomly chosen entries per tensor are probed.  The relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.

    A probe whose +-eps interval changes any max-pool argmax straddles a
    kink, where a central difference does not estimate the derivative; such
    entries are replaced by other entries of the same tensor and, if
    ``skipped`` is a list, recorded there as ``(name, index)``.  If ``report``
    is a list, one ``(name, index, analytic, numeric, rel)`` tuple per probe
    is appended.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = fn()
    loss = out if head is None else head(out)
    if not np.isfinite(loss.data).all():
        raise GradientError("function value is not finite")
    grads = backward(loss)
    _, _, base = _evaluate(fn, head)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        g = grads.get(p)
        if not (p.data.flags.c_contiguous and p.data.flags.writeable):
            raise GradientError("parameter data must be contiguous and writeable")
        flat = p.data.reshape(-1)
        n = flat.size
        order = rng.permutation(n) if max_entries is not None and max_entries < n else range(n)
        want = n if max_entries is None else min(max_entries, n)
        done = 0
        for i in order:
            if done == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp, op, sp = _evaluate(fn, head)
            flat[i] = orig - eps
            fm, om, sm = _evaluate(fn, head)
            flat[i] = orig
            if sp != base or sm != base:
                if skipped is not None:
                    skipped.append((p.name, int(i)))
                continue
            done += 1
            delta = fp - fm if head is None else head.difference(op, om)
            numeric = delta / (2.0 * eps)
            analytic = 0.0 if g is None else float(g.reshape(-1)[i])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel = abs(analytic - numeric) / denom
            worst = max(worst, rel)
            if report is not None:
                report.append((p.name, int(i), analytic, numeric, rel))
    return worst
