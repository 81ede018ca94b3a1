import numpy as np
import pytest

from snm.dataio import InteractionStore, NeighborhoodIndex, filter_sparse, split_interactions


def clustered_pairs(n_users=120, n_items=80, n_clusters=4, p_in=0.35, p_out=0.02, seed=0):
    """Block-structured implicit feedback: users mostly like their cluster's items."""
    rng = np.random.default_rng(seed)
    uc = rng.integers(0, n_clusters, n_users)
    ic = rng.integers(0, n_clusters, n_items)
    prob = np.where(uc[:, None] == ic[None, :], p_in, p_out)
    R = rng.random((n_users, n_items)) < prob
    return [(f"u{u}", f"i{i}") for u, i in np.argwhere(R)]


def toy_store(n_users=120, n_items=80, seed=0, split_seed=0) -> InteractionStore:
    store = filter_sparse(clustered_pairs(n_users, n_items, seed=seed))
    return split_interactions(store, seed=split_seed)


def ranked_store(seed=0) -> InteractionStore:
    """Large enough catalog that every held-out user has 99 negatives."""
    return toy_store(150, 160, seed=seed)


def dense_store(M=20, N=10, seed=0, density=0.5) -> InteractionStore:
    """Every pair labeled train; used by the overfitting checks."""
    rng = np.random.default_rng(seed)
    R = rng.random((M, N)) < density
    for u in range(M):
        if R[u].sum() == 0:
            R[u, 0] = True
        if R[u].sum() == N:
            R[u, 1] = False
    pairs = np.argwhere(R).astype(np.int64)
    return InteractionStore(
        [str(i) for i in range(M)], [str(i) for i in range(N)], pairs, np.zeros(len(pairs), np.int8), seed
    )


def write_ratings(path, n_users=60, n_items=50, seed=0, header=True, sep=","):
    """Explicit-rating log in movielens layout; high ratings follow clusters."""
    rng = np.random.default_rng(seed)
    uc = rng.integers(0, 3, n_users)
    ic = rng.integers(0, 3, n_items)
    lines = ["userId,movieId,rating,timestamp".replace(",", sep)] if header else []
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < 0.45:
                high = uc[u] == ic[i]
                r = rng.choice([4.0, 4.5, 5.0]) if high else rng.choice([1.0, 2.0, 3.0, 3.5])
                lines.append(sep.join([str(100 + u), str(500 + i), str(r), str(1_000_000 + u * 97 + i)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.skipped:
        status = "NOT RUN"
        detail = rep.longrepr[2].removeprefix("Skipped: ") if isinstance(rep.longrepr, tuple) else detail
    else:
        status = "PASS" if rep.passed else "FAIL"
    item.config._criteria.append((mark.args[0], mark.args[1], status, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = sorted(config._criteria, key=lambda r: (r[0], r[1]))
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, status, detail in rows:
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}" + (f" -- {detail}" if detail else ""))


@pytest.fixture
def store():
    return toy_store()


@pytest.fixture
def index(store):
    return NeighborhoodIndex.from_store(store)


def write_movielens(path, n_users=10_000, n_items=3000, per_user=40, seed=0):
    """``userId,movieId,rating,timestamp`` log with Zipf item popularity."""
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, n_items + 1) ** 0.8
    pop /= pop.sum()
    taste = rng.normal(size=(n_users, 4))
    style = rng.normal(size=(n_items, 4))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("userId,movieId,rating,timestamp\n")
        for u in range(n_users):
            k = int(rng.integers(per_user // 2, per_user * 3 // 2 + 1))
            items = np.unique(rng.choice(n_items, k, p=pop))
            raw = taste[u] @ style[items].T + rng.normal(scale=0.5, size=items.size)
            stars = np.clip(np.round((3.0 + raw) * 2) / 2, 0.5, 5.0)
            ts = 1_200_000_000 + rng.integers(0, 10**8, items.size)
            fh.writelines(f"{u + 1},{i + 1},{r},{t}\n" for i, r, t in zip(items, stars, ts))
    return path
