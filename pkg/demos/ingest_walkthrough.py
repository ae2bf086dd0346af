"""Walk one CT slice through the full ingestion pipeline, printing each stage.

Stages: raw DICOM bytes -> parsed slice -> Hounsfield units -> three clamped
windows stacked as channels -> bilinear resize to the model's input size ->
.sfi round trip. The fixture is a synthetic 16x16 "brain-ish" blob committed
under fixtures/dicom/.
"""

import tempfile
from pathlib import Path

import numpy as np

from scopeformer.data import (DEFAULT_WINDOWS, hu_window_stack,
                              parse_dicom_lite, read_sfi, resize_bilinear,
                              write_sfi)

FIXTURE = (Path(__file__).resolve().parent.parent
           / "fixtures" / "dicom" / "brainish_16x16.dcm")


def main():
    blob = FIXTURE.read_bytes()
    print(f"1. raw file: {FIXTURE.name}, {len(blob)} bytes, "
          f"magic {blob[128:132]!r}")

    ct = parse_dicom_lite(blob)
    print(f"2. parsed: {ct.rows}x{ct.cols}, raw range "
          f"[{ct.pixel_values.min()}, {ct.pixel_values.max()}], "
          f"slope {ct.rescale_slope}, intercept {ct.rescale_intercept}, "
          f"id {ct.source_id!r}")

    hu = ct.hounsfield().reshape(ct.rows, ct.cols)
    print(f"3. hounsfield: range [{hu.min():.0f}, {hu.max():.0f}] "
          f"(air -1000, water 0, acute blood 50-100)")

    stack = hu_window_stack(ct)
    names = ("brain", "subdural", "soft tissue")
    print(f"4. windows -> {stack.shape}:")
    for i, (name, w) in enumerate(zip(names, DEFAULT_WINDOWS)):
        ch = stack[..., i]
        print(f"   {name:12s} center {w.center:4.0f} width {w.width:4.0f} "
              f"-> [{ch.min():.3f}, {ch.max():.3f}], mean {ch.mean():.3f}")

    resized = resize_bilinear(stack, (32, 32))
    print(f"5. resized: {stack.shape} -> {resized.shape}, "
          f"range [{resized.min():.3f}, {resized.max():.3f}]")

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "slice.sfi"
        write_sfi(path, resized)
        back = read_sfi(path)
        print(f"6. .sfi round trip: {path.stat().st_size} bytes on disk, "
              f"bit-exact: {np.array_equal(back, resized.astype(np.float32).astype(np.float64))}")


if __name__ == "__main__":
    main()
