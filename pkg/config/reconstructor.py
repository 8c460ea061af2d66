# Deep-image-prior reconstructor, listed from the image side inwards.
# Each entry is (kind, channels, kernel); 'conv_down' and 'conv_up' use stride 2.
RECONSTRUCTOR_ENCODER = [
    ('conv_down', 16, 7), ('conv', 16, 7),
    ('conv_down', 32, 7), ('conv', 32, 7),
    ('conv_down', 64, 5), ('conv', 64, 5),
    ('conv_down', 128, 5), ('conv', 128, 5),
    ('conv_down', 128, 3), ('conv', 128, 3),
    ('conv_down', 128, 3), ('conv', 128, 3),
    ]

RECONSTRUCTOR_DECODER = [
    ('conv', 16, 7), ('conv_up', 16, 7),
    ('conv', 32, 7), ('conv_up', 32, 7),
    ('conv', 64, 5), ('conv_up', 64, 5),
    ('conv', 128, 5), ('conv_up', 128, 5),
    ('conv', 128, 3), ('conv_up', 128, 3),
    ('conv', 128, 3), ('conv_up', 128, 3),
    ]

NOISE_CHANNELS = 32
LEAKY_SLOPE = 0.2
