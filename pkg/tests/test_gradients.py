import pytest

from gradcases import CASES, segnet_spot_check, worst_error


@pytest.mark.parametrize("op", sorted(CASES))
def test_op_gradients_match_central_differences(op):
    assert worst_error(op, instances=20) < 1e-4


def test_segnet_dice_gradient_spot_check():
    for name, analytic, numeric, rel in segnet_spot_check(10):
        assert rel < 1e-3, (name, analytic, numeric)
