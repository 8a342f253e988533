import re

import numpy as np

from volscan.metrics import roc_curve
from volscan.report import roc_svg, write_roc_svg


def curve_points(svg: bytes):
    text = svg.decode()
    block = text[text.index('id="roc-curve"'):]
    path = re.search(r'<path d="([^"]+)"', block).group(1)
    pts = np.array([[float(a), float(b)] for a, b in re.findall(r"(-?[\d.]+) (-?[\d.]+)", path)])
    return pts


def test_svg_is_deterministic():
    roc = roc_curve([0.1, 0.4, 0.35, 0.8, 0.9], [0, 0, 1, 1, 1])
    assert roc_svg(roc, "m", 0.83) == roc_svg(roc, "m", 0.83)


def test_svg_curve_is_monotone_from_origin_to_corner():
    rng = np.random.default_rng(0)
    s, y = rng.random(40), rng.integers(0, 2, 40)
    roc = roc_curve(s, y)
    pts = curve_points(roc_svg(roc, "m"))
    assert len(pts) == len(roc.fpr)
    # SVG y grows downward, so tpr rising means the y coordinate falls
    assert np.all(np.diff(pts[:, 0]) >= 0) and np.all(np.diff(pts[:, 1]) <= 0)
    x0, y0 = pts[0]
    x1, y1 = pts[-1]
    assert x1 > x0 and y1 < y0
    # the chance diagonal shares both endpoints with the curve
    chance = curve_points(roc_svg(roc, "m").replace(b'id="roc-curve"', b'id="x"').replace(b'id="chance"', b'id="roc-curve"'))
    np.testing.assert_allclose(chance[[0, -1]], pts[[0, -1]])


def test_write_roc_svg(tmp_path):
    roc = roc_curve([0.2, 0.7], [0, 1])
    write_roc_svg(tmp_path / "r.svg", roc, "m", 1.0)
    assert (tmp_path / "r.svg").read_bytes().startswith(b"<?xml")
    assert list(tmp_path.iterdir()) == [tmp_path / "r.svg"]
