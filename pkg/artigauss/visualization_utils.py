import numpy as np
from PIL import Image, ImageDraw

from artigauss.gaussians import OrthographicView, SceneState, render_orthographic, transform_field

PART_PALETTE = np.array([
    [128, 128, 128],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
], dtype=np.uint8)

CAPTION_HEIGHT = 14


def part_colors(labels, static_part=None):
    """Palette color per label; the static slot is drawn grey when given."""
    labels = np.asarray(labels, dtype=np.int64)
    if static_part is None:
        index = labels % (len(PART_PALETTE) - 1) + 1
    else:
        # movable slots skip grey, keep their order around the static slot
        index = np.where(labels == static_part, 0, (labels - (labels > static_part)) % (len(PART_PALETTE) - 1) + 1)
    return PART_PALETTE[index].astype(np.float64) / 255.


def to_uint8(image):
    return (np.clip(image, 0., 1.) * 255. + 0.5).astype(np.uint8)


def render_image(state: SceneState, view: OrthographicView, resolution=(128, 128)):
    return to_uint8(render_orthographic(state, view, resolution))


def tile_images(images, captions=None):
    """Horizontal strip of equally sized uint8 images with a caption band above each tile."""
    ih, iw = images[0].shape[:2]
    strip = np.concatenate(images, axis=1)
    band = np.full([CAPTION_HEIGHT, strip.shape[1], 3], 255, np.uint8)
    img = Image.fromarray(np.concatenate([band, strip], axis=0))

    draw = ImageDraw.Draw(img)
    for w, caption in enumerate(captions or []):
        draw.text((w * iw + 3, 1), caption, fill=(0, 0, 0))
        if w > 0:
            draw.line([(w * iw, 0), (w * iw, CAPTION_HEIGHT + ih - 1)], fill=(0, 0, 0))
    return img


def visualize_parts(model, observed: SceneState = None, view_axis="z", resolution=(128, 128)):
    """Canonical field and predicted state 1 colored by part, next to the observed state 1."""
    colors = part_colors(model.labels, model.static_part)
    canonical = model.canonical.copy(colors=colors)
    predicted = transform_field(canonical.copy(centers=model.source_centers), model.transforms, model.labels)

    reference = observed.centers if observed is not None else predicted.centers
    view = OrthographicView.fit(np.concatenate([canonical.centers, reference]), view_axis)

    images = [render_image(canonical, view, resolution), render_image(predicted, view, resolution)]
    captions = ["canonical", "predicted"]
    if observed is not None:
        images.append(render_image(observed, view, resolution))
        captions.append("observed")
    return tile_images(images, captions)


def save_png(img, path):
    img.save(path, format="PNG", optimize=False)
