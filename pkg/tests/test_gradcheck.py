from mhformer import gradcheck
from mhformer.config import tiny_config
from mhformer.tensor import corrupt_adjoint

BLOCKS = {"matmul", "linear", "concat_split", "softmax_rows", "layer_norm", "gelu", "msa", "mca", "mlp",
          "encoder_layer", "mhg", "temporal_embed", "shr", "chi", "regress", "pose_loss", "full_model"}


def test_tiny_config_passes_with_every_block_reported():
    res = gradcheck.run(tiny_config(M=2, chi_any_m=True), max_coords=6)
    assert set(res) == BLOCKS
    assert gradcheck.failures(res) == []


def test_corrupted_adjoint_is_caught():
    with corrupt_adjoint("softmax_rows", 1.05):
        res = gradcheck.run(tiny_config(), max_coords=4)
    bad = set(gradcheck.failures(res))
    assert "softmax_rows" in bad and "full_model" in bad
    assert "matmul" not in bad


def test_tolerances():
    assert gradcheck.tolerance("matmul") == 1e-6 and gradcheck.tolerance("full_model") == 1e-4
