import json
import struct

import numpy as np
import pytest

from pathonet import formats
from pathonet.labels import CellAnnotation, render_density_map


def test_annotation_roundtrip(tmp_path):
    cells = [CellAnnotation(3, 4, "immunopositive"), CellAnnotation(10, 0, "lymphocyte", 180.25)]
    path = tmp_path / "a.json"
    formats.write_annotations(path, cells)
    assert formats.read_annotations(path) == cells
    doc = json.loads(path.read_text())
    assert doc[0] == {"x": 3, "y": 4, "class": "immunopositive"}
    assert doc[1]["score"] == 180.25


@pytest.mark.parametrize("text", ['{"x": 1}', '[{"x": 1, "y": 2}]', '[{"x": 1, "y": 2, "class": "other"}]',
                                  '[{"x": 1.5, "y": 2, "class": "lymphocyte"}]', "not json"])
def test_annotation_errors(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(formats.FormatError):
        formats.read_annotations(path)


def test_dmap_roundtrip_and_layout(tmp_path):
    m = render_density_map([CellAnnotation(2, 3, "immunonegative")], (8, 10))
    path = tmp_path / "m.dmap"
    formats.write_dmap(path, m)
    raw = path.read_bytes()
    assert raw[:4] == b"DMAP"
    assert struct.unpack("<IIII", raw[4:20]) == (1, 3, 8, 10)
    assert len(raw) == 20 + 4 * 3 * 8 * 10
    assert np.frombuffer(raw[20:], "<f4").tobytes() == m.astype("<f4").tobytes()
    assert formats.read_dmap(path).tobytes() == m.tobytes()


def test_dmap_errors(tmp_path):
    path = tmp_path / "m.dmap"
    formats.write_dmap(path, np.zeros((3, 2, 2), np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(formats.FormatError):
        formats.read_dmap(path)
    path.write_bytes(b"XMAP" + raw[4:])
    with pytest.raises(formats.FormatError):
        formats.read_dmap(path)
    path.write_bytes(raw[:4] + struct.pack("<I", 7) + raw[8:])
    with pytest.raises(formats.FormatError):
        formats.read_dmap(path)


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    path = tmp_path / "i.png"
    formats.write_png(path, img)
    assert np.array_equal(formats.read_png(path), img)
    with pytest.raises(formats.FormatError):
        formats.write_png(path, img.astype(np.float32))
    path.write_bytes(b"garbage")
    with pytest.raises(formats.FormatError):
        formats.read_png(path)


def test_counts_inputs(tmp_path):
    p = tmp_path / "c"
    p.write_text("immunopositive 15755\nimmunonegative=32639\n# comment\nlymphocyte: 1378\n")
    assert formats.read_cells_or_counts(p) == {"immunopositive": 15755, "immunonegative": 32639, "lymphocyte": 1378}
    p.write_text('{"immunopositive": 2, "lymphocyte": 1}')
    assert formats.read_cells_or_counts(p) == {"immunopositive": 2, "immunonegative": 0, "lymphocyte": 1}
    formats.write_annotations(p, [CellAnnotation(0, 0, "immunonegative")] * 3)
    assert formats.read_cells_or_counts(p)["immunonegative"] == 3
    for bad in ('{"tumor": 3}', '{"lymphocyte": -1}', "lymphocyte lots", ""):
        p.write_text(bad)
        with pytest.raises(formats.FormatError):
            formats.read_cells_or_counts(p)
