import math

import numpy as np
import pytest

from dnr.errors import ContractViolation
from dnr.pid import (
    JointDist,
    imin_redundancy,
    kl_simplex,
    mutual_info,
    pid_decompose,
    read_joint_csv,
    specific_info,
)


def gate(fn) -> JointDist:
    p = np.zeros((2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            p[fn(a, b), a, b] += 0.25
    return JointDist(p)


XOR = gate(lambda a, b: a ^ b)
AND = gate(lambda a, b: a & b)
COPY = JointDist(np.array([[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.5]]]))


def entropy(probs) -> float:
    return -sum(p * math.log2(p) for p in probs if p > 0)


def loop_mi(joint: JointDist, sources) -> float:
    """H(Y) + H(S) - H(Y, S) with explicit loops over the table."""
    ny, na, nb = joint.p.shape
    table: dict = {}
    for y in range(ny):
        for a in range(na):
            for b in range(nb):
                s = tuple(v for v, k in ((a, "A"), (b, "B")) if k in sources)
                table[(y, s)] = table.get((y, s), 0.0) + joint.p[y, a, b]
    p_s: dict = {}
    for (_, s), v in table.items():
        p_s[s] = p_s.get(s, 0.0) + v
    return entropy(joint.p_y) + entropy(p_s.values()) - entropy(table.values())


def random_joint(rng, shape=None) -> JointDist:
    shape = shape or tuple(rng.integers(2, 5, size=3))
    p = rng.dirichlet(np.full(np.prod(shape), 0.5)).reshape(shape)
    return JointDist(p / p.sum())


def test_mi_independent():
    assert mutual_info(JointDist(np.full((2, 2, 2), 0.125)), {"A", "B"}) == 0.0


def test_mi_copy():
    assert mutual_info(COPY, {"A"}) == pytest.approx(1.0, abs=1e-12)


def test_mi_and_gate():
    h = entropy([0.25, 0.75])
    assert h == pytest.approx(0.8113, abs=1e-4)
    assert mutual_info(AND, {"A"}) == pytest.approx(h - 0.5, abs=1e-12)
    assert mutual_info(AND, {"B"}) == pytest.approx(0.3113, abs=1e-4)
    assert mutual_info(AND, {"A", "B"}) == pytest.approx(h, abs=1e-12)


def test_mi_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        joint = random_joint(rng)
        for src in ({"A"}, {"B"}, {"A", "B"}):
            assert mutual_info(joint, src) == pytest.approx(loop_mi(joint, src), abs=1e-12)


def test_specific_info_examples():
    indep = JointDist(np.full((2, 2, 2), 0.125))
    assert specific_info(indep, 0, "A") == 0.0
    assert specific_info(COPY, 0, "A") == pytest.approx(1.0, abs=1e-12)
    assert specific_info(AND, 1, "A") == pytest.approx(1.0, abs=1e-12)


def test_specific_info_zero_outcome():
    p = np.zeros((2, 2, 2))
    p[0] = 0.25
    with pytest.raises(ContractViolation):
        specific_info(JointDist(p), 1, "A")


def test_imin_examples():
    assert imin_redundancy(XOR) == 0.0
    assert imin_redundancy(COPY) == pytest.approx(1.0, abs=1e-12)
    assert imin_redundancy(AND) == pytest.approx(0.3113, abs=1e-4)


def test_atoms_canonical_gates():
    assert pid_decompose(XOR).as_row() == "0.000000,0.000000,0.000000,1.000000"
    assert pid_decompose(COPY).as_row() == "0.000000,0.000000,1.000000,0.000000"
    atoms = pid_decompose(AND)
    assert (atoms.u1, atoms.u2) == pytest.approx((0.0, 0.0), abs=1e-12)
    assert atoms.r == pytest.approx(0.3113, abs=1e-4)
    assert atoms.s == pytest.approx(0.5, abs=1e-4)


def test_random_joints_identity_and_bounds():
    rng = np.random.default_rng(1)
    for _ in range(100):
        joint = random_joint(rng)
        atoms = pid_decompose(joint)
        i_a, i_b = mutual_info(joint, {"A"}), mutual_info(joint, {"B"})
        i_ab = mutual_info(joint, {"A", "B"})
        assert abs(atoms.total - i_ab) < 1e-9
        assert -1e-12 <= atoms.r <= min(i_a, i_b) + 1e-9
        assert min(atoms.u1, atoms.u2, atoms.s) >= 0.0
        assert i_ab >= max(i_a, i_b) - 1e-12


def test_relabeling_a_leaves_atoms():
    rng = np.random.default_rng(2)
    for _ in range(20):
        joint = random_joint(rng)
        perm = rng.permutation(joint.p.shape[1])
        moved = pid_decompose(JointDist(joint.p[:, perm, :]))
        base = pid_decompose(joint)
        for x, y in zip((base.u1, base.u2, base.r, base.s), (moved.u1, moved.u2, moved.r, moved.s)):
            assert abs(x - y) < 1e-12


@pytest.mark.parametrize("p", [
    np.full((2, 2, 2), 0.2),
    -np.full((2, 2, 2), 0.125),
    np.full((2, 2), 0.25),
    np.full((65, 1, 1), 1 / 65),
])
def test_invalid_joints(p):
    with pytest.raises(ContractViolation):
        JointDist(p)


def test_from_samples_and_csv(tmp_path):
    joint = JointDist.from_samples([0, 1, 1, 0], [0, 0, 1, 1], [0, 1, 0, 1])
    assert pid_decompose(joint).as_row() == "0.000000,0.000000,0.000000,1.000000"
    path = tmp_path / "xor.csv"
    path.write_text("y,a,b,p\n0,0,0,0.25\n1,0,1,0.25\n1,1,0,0.25\n0,1,1,0.25\n")
    assert np.array_equal(read_joint_csv(path).p, XOR.p)


def test_kl_examples():
    assert kl_simplex([0.3, -1.0, 2.0], [0.3, -1.0, 2.0]) == 0.0
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    q = p[::-1]
    direct = float(np.sum(p * np.log(p / q)))
    value = kl_simplex([1.0, 0.0], [0.0, 1.0])
    assert value == pytest.approx(direct, abs=1e-12)
    assert value == pytest.approx(0.4621, abs=1e-4)


def test_kl_rowwise_and_guards():
    rows = kl_simplex(np.eye(3), np.eye(3)[::-1])
    assert rows.shape == (3,) and rows[1] == 0.0
    with pytest.raises(ContractViolation):
        kl_simplex([1.0], [1.0])
    with pytest.raises(ContractViolation):
        kl_simplex([1.0, np.nan], [1.0, 0.0])
