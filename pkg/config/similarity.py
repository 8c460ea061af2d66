# Example similarity groups for the false-positive taxonomy (VOC-like).
# One group per entry; categories inside a group count as "similar".
SIMILARITY_GROUPS = [
    ['aeroplane', 'bicycle', 'boat', 'bus', 'car', 'motorbike', 'train'],
    ['bird', 'cat', 'cow', 'dog', 'horse', 'sheep', 'person'],
    ['chair', 'diningtable', 'sofa'],
    ['bottle', 'pottedplant', 'tvmonitor'],
    ]

DIAGNOSIS_THRESHOLDS = {
    'weak_iou': 0.1,
    'correct_iou': 0.5,
    }
