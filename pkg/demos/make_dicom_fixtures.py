"""Regenerate the committed DICOM fixtures under fixtures/dicom/.

Deterministic: running this twice produces byte-identical files. See
fixtures/dicom/README.md for the layout of each file.
"""

from pathlib import Path

import numpy as np

from scopeformer.data import parse_dicom_lite, write_dicom_lite

OUT = Path(__file__).resolve().parent.parent / "fixtures" / "dicom"


def brainish(size: int = 16) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    blob = 30.0 * np.exp(-((yy - size // 2) ** 2 + (xx - size // 2) ** 2) / 20.0)
    return np.clip(1024 + 40 + blob, 0, 4095).astype(np.uint16)


CASES = {
    "basic_2x2.dcm": dict(
        pixels=np.array([[0, 100], [200, 300]], dtype=np.uint16),
        slope=1.0, intercept=-1024.0, source_id="fixture.basic.2x2"),
    "no_rescale_4x4.dcm": dict(
        pixels=np.arange(16, dtype=np.uint16).reshape(4, 4) * 64,
        include_rescale=False, source_id="fixture.norescale.4x4"),
    "signed_3x3.dcm": dict(
        pixels=np.array([[-1000, -500, 0], [250, 500, 750],
                         [1000, 2000, 3000]], dtype=np.int16),
        slope=1.0, intercept=0.0, source_id="fixture.signed.3x3"),
    "brainish_16x16.dcm": dict(
        pixels=brainish(), slope=1.0, intercept=-1024.0,
        source_id="fixture.brainish.16x16"),
}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, kw in CASES.items():
        blob = write_dicom_lite(**kw)
        (OUT / name).write_bytes(blob)
        ct = parse_dicom_lite(blob)
        print(f"{name}: {len(blob)} bytes, {ct.rows}x{ct.cols}, "
              f"slope {ct.rescale_slope}, intercept {ct.rescale_intercept}, "
              f"warnings {list(ct.warnings)}")


if __name__ == "__main__":
    main()
