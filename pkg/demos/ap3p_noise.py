# %% [markdown]
# # AP3P under pixel noise
#
# Exact recovery on noise-free triples, then the rotation error when the three
# pixels are perturbed by Gaussian noise of increasing size.

# %%
import numpy as np

from surfdist.errors import SurfdistError
from surfdist.geometry import Camera, Pose, project, rotation_angle, rotvec_to_matrix
from surfdist.pose import ap3p

cam = Camera(200.0, 200.0, 112.0, 112.0, 224, 224)
rng = np.random.default_rng(0)


def instance():
    R = rotvec_to_matrix(rng.normal(size=3))
    t = np.array([0.0, 0.0, rng.uniform(400, 600)])
    w = rng.uniform(-60, 60, (3, 3))
    return R, t, w, project(Pose(R, t), cam, w)[0]


# %%
for sigma in (0.0, 0.25, 0.5, 1.0):
    errors = []
    for _ in range(300):
        R, t, w, uv = instance()
        try:
            sols = ap3p(uv + rng.normal(0, sigma, uv.shape), w, cam, max_residual=np.inf)
        except SurfdistError:
            continue
        errors.append(min(np.degrees(rotation_angle(p.rotation, R)) for p in sols))
    print(f"sigma {sigma:4.2f} px: median rotation error {np.median(errors):.2e} deg over {len(errors)} triples")
