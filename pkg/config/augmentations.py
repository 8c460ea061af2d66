# Cumulative augmentation stages, one row per stage in application order.
AUGMENTATION_STAGES = [
    'horizontal_flip',      # 1: RandomHorizontalFlip(0.5)
    'random_resized_crop',  # 2: RandomResizedCrop
    'color_jitter',         # 3: ColorJitter(0.4, 0.4, 0.4, 0.1)
    'grayscale',            # 4: RandomGrayscale(p=0.2)
    'gaussian_blur',        # 5: GaussianBlur(sigma 0.1 .. 2.0)
    ]

# Lower bound of the crop area scale per pretraining mode.
CROP_SCALE_MIN = {
    'supervised': 0.08,
    'unsupervised': 0.2,
    }

AUGMENTATION_DEFAULTS = {
    'flip_p': 0.5,
    'crop_ratio': (3 / 4, 4 / 3),
    'jitter': (0.4, 0.4, 0.4, 0.1),  # brightness, contrast, saturation, hue
    'jitter_p': 0.8,
    'grayscale_p': 0.2,
    'blur_sigma': (0.1, 2.0),
    'blur_p': 0.5,
    'output_size': 32,  # 224 at full ImageNet scale
    }

MIN_IMAGE_SIZE = 8
