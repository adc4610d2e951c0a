import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from koopmpc import plants
from koopmpc.lifting import Trial
from koopmpc.qp import DenseQp, MpcProblemSpec

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def exact_plant_trials(n_trials=10, samples=501, seed=0, T_s=0.1):
    """Noise-free exact-lifting trials from random initial states and random ramps."""
    plant = plants.exact_lifting_plant()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_trials):
        table = rng.uniform(-2.0, 2.0, size=(1, samples // 20 + 3))
        t = T_s * np.arange(samples)
        u = plants.ramp_inputs(table, 2.0, t)
        x0 = rng.uniform(-2.0, 2.0, size=2)
        out.append(plants.simulate(plant, u, T_s, rng, x0=x0, name=f"exact{i}"))
    return out


@pytest.fixture(scope="session")
def exact_trials():
    return exact_plant_trials()


def surrogate_trials(noise_std=0.4, n_trials=3, duration=120.0, seed=5, T_s=0.1):
    """Ramp-excited surrogate-plant trials (the same recipe as the collect command)."""
    plant = plants.arm_surrogate_plant(noise_std=noise_std)
    rng = np.random.default_rng(seed)
    t = T_s * np.arange(int(round(duration / T_s)) + 1)
    out = []
    for i in range(n_trials):
        T_u = rng.uniform(5.0, 10.0)
        table = plants.random_ramp_table(rng, int(np.ceil(t[-1] / T_u)) + 2)
        out.append(plants.simulate(plant, plants.ramp_inputs(table, T_u, t), T_s, rng,
                                   name=f"surrogate{i}"))
    return out


def random_trial(rng, length=50, n=2, m=3, T_s=0.1, name="") -> Trial:
    return Trial(T_s * np.arange(length), rng.standard_normal((length, n)),
                 rng.standard_normal((length, m)), name)


# --- QP oracles ------------------------------------------------------------

def brute_force_qp(Q, q, A, b, tol=1e-9):
    """Exhaustive active-set solve of ``min x'Qx + q'x  s.t.  A x <= b`` (Q positive definite).

    Every subset of at most ``n`` constraints is treated as active, its KKT
    system solved directly, and the best primal-dual feasible candidate kept.
    """
    n, c = len(q), len(b)
    best, best_f = None, np.inf
    for size in range(min(n, c) + 1):
        for W in itertools.combinations(range(c), size):
            W = list(W)
            K = np.block([[2 * Q, A[W].T], [A[W], np.zeros((size, size))]])
            if np.linalg.matrix_rank(K) < n + size:
                continue
            sol = np.linalg.solve(K, np.concatenate([-q, b[W]]))
            x, y = sol[:n], sol[n:]
            if np.all(A @ x <= b + tol) and np.all(y >= -tol):
                f = x @ Q @ x + q @ x
                if f < best_f:
                    best, best_f = x, f
    return best, best_f


def random_convex_qp(rng, n=None, c=None):
    """Feasible strictly convex QP with ``n <= 6`` variables and ``c <= 8`` inequalities."""
    n = int(rng.integers(1, 7)) if n is None else n
    c = int(rng.integers(0, 9)) if c is None else c
    M = rng.standard_normal((n, n))
    Q = M @ M.T + 0.1 * np.eye(n)
    q = 3 * rng.standard_normal(n)
    A = rng.standard_normal((c, n))
    b = A @ rng.standard_normal(n) + rng.uniform(0, 1, c)
    return DenseQp(Q, q, A, b)


def random_mpc_spec(rng, N=None, m=None, Nh=None, constrained=True):
    N = int(rng.integers(1, 6)) if N is None else N
    m = int(rng.integers(1, 4)) if m is None else m
    Nh = int(rng.integers(1, 6)) if Nh is None else Nh

    def psd(k):
        M = rng.standard_normal((k, k))
        return M @ M.T

    E, F, b = [], [], []
    if constrained:
        E = [rng.standard_normal((2, N)) for _ in range(Nh)]
        F = [rng.standard_normal((2, m)) for _ in range(Nh)]
        b = [rng.standard_normal(2) for _ in range(Nh)]
    return MpcProblemSpec(0.5 * rng.standard_normal((N, N)), rng.standard_normal((N, m)),
                          [psd(N) for _ in range(Nh + 1)], [psd(m) for _ in range(Nh)],
                          [rng.standard_normal(N) for _ in range(Nh + 1)],
                          [rng.standard_normal(m) for _ in range(Nh)], E, F, b)


def strip_timing(path):
    """File bytes with wall-clock fields removed (the solve_ms log column)."""
    text = path.read_text()
    if path.name.startswith("log_") and path.suffix == ".csv":
        text = "\n".join(line.rsplit(",", 1)[0] for line in text.splitlines())
    return text


def same_outputs(a, b, skip=("timing.json", "config.yaml")):
    """Relative paths of files that differ between two output trees."""
    files_a = {p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name not in skip}
    files_b = {p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name not in skip}
    diff = sorted(str(p) for p in files_a ^ files_b)
    diff += sorted(str(p) for p in files_a & files_b if strip_timing(a / p) != strip_timing(b / p))
    return diff
