"""HEDI: abdominal wall instability from rest/Valsalva scan pairs.

The pipeline registers body masks with a symmetric diffeomorphic scheme,
derives Green-Lagrange strain from the displacement field, measures the
surface area moving more than a threshold and reports hernia volume ratios.
"""

__version__ = "0.1.0"
