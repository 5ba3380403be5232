"""Brain-tumour segmentation on multi-modal MRI with style-transfer augmentation.

Everything runs on numpy: NIfTI I/O, preprocessing, a fixed random feature
extractor for neural style transfer, a small U-Net with hand-written
gradients, training with k-fold bookkeeping, metrics and a paired t-test.
"""

__version__ = "0.1.0"
