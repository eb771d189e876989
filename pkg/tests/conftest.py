import pytest

from neukonfig.profiles import ComputeUnit, DnnProfile


def build_profile(name, input_size, rows):
    """Build a profile from (edge_ms, cloud_ms, output_mb) rows."""
    units = tuple(
        ComputeUnit(id=i, label=f"u{i}", edge_time=e, cloud_time=c, output_size=o)
        for i, (e, c, o) in enumerate(rows)
    )
    block_map = tuple((i, i) for i in range(len(rows)))
    return DnnProfile(name=name, input_size=input_size, units=units, block_map=block_map)


@pytest.fixture
def p2():
    """Two-unit profile: edge (40, 60) ms, cloud (0.5, 0.5) ms, outputs (2, 1) Mb."""
    return build_profile("p2", 10.0, [(40.0, 0.5, 2.0), (60.0, 0.5, 1.0)])
