# Learning-free depth completion from LiDAR scans
