# File format clients (tensor files, model bundles)
