import numpy as np
import pytest

from sefdet.validation import (InputError, check_batch_images, check_image,
                               check_in, check_same_shape)


def test_check_image_accepts_2d_and_3d():
    g = check_image(np.zeros((4, 6)))
    assert g.shape == (4, 6) and g.dtype == np.float32
    c = check_image(np.zeros((4, 6, 3)))
    assert c.shape == (4, 6, 3)


def test_check_image_squeezes_single_channel():
    out = check_image(np.zeros((4, 4, 1)))
    assert out.shape == (4, 4)


def test_check_image_channel_mismatch():
    with pytest.raises(InputError):
        check_image(np.zeros((4, 4)), channels=3)
    with pytest.raises(InputError):
        check_image(np.zeros((4, 4, 3)), channels=1)


def test_check_image_rejects_bad_shapes():
    for bad in (np.zeros(5), np.zeros((2, 2, 2)), np.zeros((1, 2, 3, 4))):
        with pytest.raises(InputError):
            check_image(bad)


def test_check_image_range_tolerance():
    # 1e-7 beyond the unit range is round-off, clip it; 1e-3 is a caller bug
    out = check_image(np.full((2, 2), 1.0 + 1e-7))
    assert out.max() == 1.0
    out = check_image(np.full((2, 2), -1e-7))
    assert out.min() == 0.0
    with pytest.raises(InputError):
        check_image(np.full((2, 2), 1.001))
    with pytest.raises(InputError):
        check_image(np.full((2, 2), -0.001))


def test_check_image_multiple_of():
    check_image(np.zeros((16, 24)), multiple_of=8)
    with pytest.raises(InputError):
        check_image(np.zeros((16, 20)), multiple_of=8)


def test_check_same_shape():
    check_same_shape(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(InputError):
        check_same_shape(np.zeros((2, 3)), np.zeros((3, 2)))


def test_check_batch_images_promotes_single():
    out = check_batch_images(np.zeros((8, 8, 3)))
    assert out.shape == (1, 8, 8, 3)


def test_check_batch_images_resolution():
    check_batch_images(np.zeros((2, 8, 8, 3)), resolution=8)
    with pytest.raises(InputError):
        check_batch_images(np.zeros((2, 8, 8, 3)), resolution=16)
    with pytest.raises(InputError):
        check_batch_images(np.zeros((2, 8, 8)))


def test_check_in():
    assert check_in("a", ("a", "b"), "x") == "a"
    with pytest.raises(InputError):
        check_in("c", ("a", "b"), "x")
