import subprocess
import sys

import numpy as np
import pytest

from dnllab import precision


def test_default_mode_is_f64():
    assert precision.precision_mode() in ("f64", "f32")
    assert precision.scalar_dtype() in (np.float64, np.float32)


def test_set_precision_round_trip():
    original = precision.precision_mode()
    try:
        precision.set_precision("f32")
        assert precision.scalar_dtype() is np.float32
        assert precision.as_scalar_array([1.0]).dtype == np.float32
        precision.set_precision("f64")
        assert precision.scalar_dtype() is np.float64
    finally:
        precision.set_precision(original)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        precision.set_precision("f16")


def test_env_var_selects_f32_in_fresh_interpreter():
    code = (
        "import numpy as np\n"
        "from dnllab import blocks, toyseg\n"
        "from dnllab.precision import precision_mode\n"
        "assert precision_mode() == 'f32'\n"
        "cfg = toyseg.TrainConfig(variant='DNL', seed=0, iterations=2,\n"
        "                         eval_every=2, height=8, width=8, channels=8,\n"
        "                         train_scenes=2, val_scenes=1, eval_train_scenes=1)\n"
        "scene = toyseg.generate_scene(0, cfg)\n"
        "assert scene.features.dtype == np.float32\n"
        "result = toyseg.train(cfg)\n"
        "assert result.model.weights.stem.dtype == np.float32\n"
        "print('f32ok')\n"
    )
    proc = subprocess.run(
        [sys.executable, "-c", code],
        env={"DNLLAB_PRECISION": "f32", "PATH": "/usr/bin:/bin:/usr/local/bin"},
        capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    assert "f32ok" in proc.stdout
