"""fewseg3d: few-shot 3D point cloud semantic segmentation on synthetic scenes.

A numpy library implementing the full episodic pipeline: synthetic scene
generation, a supervised edge-convolution feature learner, a self-supervised
denoising-diffusion feature learner, prototype generation, push-pull
prototype alignment, cosine-similarity segmentation with a prototype
calibration loss, and a meta-training/evaluation engine with ablation and
sweep harnesses.
"""

__version__ = "0.1.0"


def _tune_malloc():
    """Keep large numpy temporaries on the heap instead of mmap.

    glibc returns mmap'd blocks to the kernel on free, so every multi-MB
    temporary in the episode loop pays page faults again; raising the mmap
    and trim thresholds lets freed blocks be reused (about 3x faster episode
    throughput here). No-op off glibc; opt out with FEWSEG3D_NO_MALLOC_TUNING.
    """
    import ctypes
    import os

    if os.environ.get("FEWSEG3D_NO_MALLOC_TUNING"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        m_mmap_threshold, m_trim_threshold = -3, -1
        libc.mallopt(m_mmap_threshold, 256 * 1024 * 1024)
        libc.mallopt(m_trim_threshold, 256 * 1024 * 1024)
    except Exception:
        pass


_tune_malloc()
