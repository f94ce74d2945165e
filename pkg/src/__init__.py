# MXFormer simulator - modular package
