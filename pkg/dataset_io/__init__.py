# KITTI-convention file formats and frame discovery
