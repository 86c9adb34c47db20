"""Part kinds, defect types and severities shared by the generator and loaders."""

PART_KINDS = ("bearing", "gear", "bolt")

DEFECT_TYPES = ("scratch", "crack", "wear", "broken_tooth", "burr", "deformation", "rust")

PART_DEFECTS = {
    "bearing": ("scratch", "crack", "wear"),
    "gear": ("broken_tooth", "burr", "wear"),
    "bolt": ("deformation", "crack", "rust"),
}

SEVERITIES = ("minor", "moderate", "severe")

SEVERITY_TOKENS = {"m": "minor", "d": "moderate", "s": "severe"}
TOKEN_FOR_SEVERITY = {v: k for k, v in SEVERITY_TOKENS.items()}
