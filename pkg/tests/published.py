# (female %, male %, gap %) rows of the published CK+ fairness sweeps
PRUNING_SWEEP = {
    0: (67.08, 69.44, 2.36),
    10: (59.86, 75.46, 15.60),
    20: (62.77, 75.69, 12.92),
    30: (62.36, 75.69, 13.33),
    40: (63.47, 69.67, 6.20),
    50: (59.86, 71.06, 11.20),
    60: (44.02, 36.34, 7.68),
}

CLUSTER_SWEEP = {
    4: (43.05, 47.22, 4.17),
    8: (59.30, 72.91, 13.61),
    16: (56.38, 76.15, 19.77),
    32: (60.55, 72.68, 12.13),
    64: (60.27, 78.47, 18.20),
    128: (59.16, 72.45, 13.29),
}

# report columns of the full CK+ results table
REPORT_COLUMNS = ["Model", "Size (MB)", "Overall acc.", "Female acc.", "Male acc."]
