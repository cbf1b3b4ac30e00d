"""Rigid-body math, meshes, even surface sampling and point rendering."""
from surfdist.geometry.mesh import (Mesh, blob_mesh, box_mesh, cylinder_mesh,
                                    icosphere_mesh, read_obj, write_obj)
from surfdist.geometry.raycast import RayHits, hit_normals, raycast_mesh, raycast_sphere
from surfdist.geometry.render import (RenderedCrop, render_point_zbuffer,
                                      splat_radius, visible_coordinates,
                                      zbuffer_indices)
from surfdist.geometry.sampling import (SurfaceSampleSet, read_sset,
                                        sample_surface_even, write_sset)
from surfdist.geometry.transform import (Camera, Pose, backproject,
                                         matrix_to_rotvec, project,
                                         rotation_angle, rotvec_to_matrix)

__all__ = [
    "Camera", "Mesh", "Pose", "RayHits", "RenderedCrop", "SurfaceSampleSet", "backproject",
    "blob_mesh", "box_mesh", "cylinder_mesh", "hit_normals", "icosphere_mesh", "matrix_to_rotvec",
    "project", "raycast_mesh", "raycast_sphere", "read_obj", "read_sset", "render_point_zbuffer", "rotation_angle",
    "rotvec_to_matrix", "sample_surface_even", "splat_radius", "visible_coordinates",
    "write_obj", "write_sset", "zbuffer_indices",
]
