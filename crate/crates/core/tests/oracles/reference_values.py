"""Extended-precision reference values frozen into the Rust test suites.

Run with `python3 reference_values.py`; every printed value is copied
verbatim into the corresponding test. Uses mpmath at 50 significant digits
and shares no code with the Rust implementation.
"""
from mpmath import mp, mpf, exp, sqrt, pi, erf, log

mp.dps = 50


def phi(x, mu, var):
    return exp(-(x - mu) ** 2 / (2 * var)) / sqrt(2 * pi * var)


def cdf(x, mu, var):
    return (1 + erf((x - mu) / sqrt(2 * var))) / 2


def truncated(l, mu, var, r1, r2):
    return phi(l, mu, var) / (cdf(r2, mu, var) - cdf(r1, mu, var))


def levels(c, r1, r2):
    return [mpf(k) / (c - 1) * (r2 - r1) + r1 for k in range(c)]


def discretize(mu, var, c, r1, r2):
    ls = levels(c, r1, r2)
    p = [truncated(l, mu, var, r1, r2) for l in ls]
    s = sum(p)
    return [x / s for x in p]


def show(name, xs):
    if not isinstance(xs, list):
        xs = [xs]
    print(name, "=", "[" + ", ".join(mp.nstr(x, 20) for x in xs) + "]")


show("truncated_density(l=2, mu=2, var=0.25, [1,5])", truncated(mpf(2), mpf(2), mpf("0.25"), 1, 5))
show("truncated_density(l=3.7, mu=2, var=0.25, [1,5])", truncated(mpf("3.7"), mpf(2), mpf("0.25"), 1, 5))
show("discretize(mu=2, var=0.25, C=5)", discretize(mpf(2), mpf("0.25"), 5, 1, 5))
show("discretize(mu=3, var=2, C=5)", discretize(mpf(3), mpf(2), 5, 1, 5))
q = discretize(mpf("3.2"), mpf("0.5"), 5, 1, 5)
show("dist_mean(discretize(mu=3.2, var=0.5))", sum(a * b for a, b in zip(q, levels(5, 1, 5))))

z = [mpf(k) for k in range(1, 6)]
m = sum(exp(v) for v in z)
show("softmax([1,2,3,4,5])", [exp(v) / m for v in z])

p = [mpf("0.1"), mpf("0.2"), mpf("0.3"), mpf("0.25"), mpf("0.15")]
mean = sum(a * b for a, b in zip(p, levels(5, 1, 5)))
show("dist_var([0.1,0.2,0.3,0.25,0.15])", sum(a * (l - mean) ** 2 for a, l in zip(p, levels(5, 1, 5))))


def logistic(x, b):
    return b[0] * (mpf("0.5") - 1 / (1 + exp(b[1] * (x - b[2])))) + b[3] * x + b[4]


betas = [mpf(2), mpf("1.5"), mpf(3), mpf("0.3"), mpf(1)]
show("logistic_map([1,2.2,3,3.7,5], betas=[2,1.5,3,0.3,1])",
     [logistic(mpf(x), betas) for x in ["1", "2.2", "3", "3.7", "5"]])

# Gaussian ML fit of a flat histogram (mean 3, biased variance 2), discretized
# at the five categories and compared against the flat frequency vector.
g = [exp(-(mpf(k) - 3) ** 2 / 4) for k in range(1, 6)]
s = sum(g)
g = [x / s for x in g]
show("gof_gaussian_rmse(uniform histogram)", sqrt(sum((x - mpf("0.2")) ** 2 for x in g) / 5))

# Exact entropy of the discretized label distribution used by the source loss
# minimiser example.
show("entropy(discretize(mu=2, var=0.25))", -sum(x * log(x) for x in discretize(mpf(2), mpf("0.25"), 5, 1, 5)))


def adam_quadratic():
    """Ten Adam steps on f(x, y) = 0.5 * (3 x^2 + x y + 2 y^2) - x + 2 y."""
    lr, b1, b2, eps = mp.mpf("0.1"), mp.mpf("0.9"), mp.mpf("0.999"), mp.mpf("1e-8")
    p = [mp.mpf("1.5"), mp.mpf("-0.5")]
    m = [mp.mpf(0)] * 2
    v = [mp.mpf(0)] * 2
    traj = []
    for t in range(1, 11):
        g = [3 * p[0] + p[1] / 2 - 1, p[0] / 2 + 2 * p[1] + 2]
        for i in range(2):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            p[i] = p[i] - lr * mh / (mp.sqrt(vh) + eps)
        traj.append([mp.nstr(x, 20) for x in p])
    return traj


if __name__ == "__main__":
    print("adam quadratic trajectory:")
    for row in adam_quadratic():
        print(row)
