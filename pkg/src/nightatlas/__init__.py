"""Night-time city classification from single labelled reference images.

Modules: ``imgproc`` (enhancement and geometry), ``augment`` (seeded
single-reference augmentation), ``spectral`` (2D FFT), ``eigencity`` (PCA and
threshold voting), ``neuralnet`` (numpy CNN), ``harness`` (training loops),
``evalkit`` (metrics and reports), ``dataio`` (manifests, downloads,
synthetic fixtures) and ``cli``.
"""

__version__ = "0.1.0"
