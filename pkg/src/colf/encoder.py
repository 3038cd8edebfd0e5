"""Small trainable image encoder producing half-resolution feature volumes."""
import numpy as np

from .numerics import Conv2d, Module, Tensor, ShapeError
from .numerics import tensor as T


class Encoder(Module):
    """3 -> d/2 (stride 1) -> d (stride 2) -> d (stride 1), 3x3 kernels, ELU between.

    Output feature (i, j) is centred on input pixel (2i, 2j).
    """

    def __init__(self, d, rng):
        if d < 2 or d % 2:
            raise ValueError(f"feature width d must be an even integer >= 2, got {d}")
        self.d = d
        self.conv1 = Conv2d(3, d // 2, 3, rng, stride=1)
        self.conv2 = Conv2d(d // 2, d, 3, rng, stride=2)
        self.conv3 = Conv2d(d, d, 3, rng, stride=1)

    def __call__(self, images):
        """images: (N, H, W, 3) array or tensor in [0, 1] -> (N, ceil(H/2), ceil(W/2), d)."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"encoder expects (N, H, W, 3) images, got {x.shape}")
        x = x * 2.0 - 1.0
        x = T.elu(self.conv1(x))
        x = T.elu(self.conv2(x))
        return self.conv3(x)


def encode(encoder, image, camera=None):
    """Encode one (H, W, 3) image; checks extents against ``camera`` when given."""
    image = np.asarray(image, dtype=np.float64)
    if camera is not None and image.shape[:2] != (camera.height, camera.width):
        raise ShapeError(f"image extents {image.shape[:2]} do not match camera {(camera.height, camera.width)}")
    return encoder(image[None]).reshape(encoder_out_shape(image.shape, encoder.d))


def encoder_out_shape(image_shape, d):
    h, w = image_shape[:2]
    return (-(-h // 2), -(-w // 2), d)
