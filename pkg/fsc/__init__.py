# Few-point completion package
