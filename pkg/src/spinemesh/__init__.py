"""Template-deformation networks for 2-D lumbar spine meshes."""
