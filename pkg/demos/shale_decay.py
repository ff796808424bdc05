"""High-mode decay of the pair-creation block r.

Smooth bumps give row norms of r that fall off faster than any power of the
mode frequency, while a box profile with a jump only decays slowly.
"""
from kgconnection.bogoliubov import shale_sweep
from kgconnection.geometry import GridSpec, PerturbationSpec


def main():
    grid = GridSpec(t_min=-7.0, t_max=7.0)
    cutoffs = [3, 7, 11, 15]
    for profile in ("bump", "box"):
        spec = PerturbationSpec("conformal_bump", (0.0, 0.0), (6.0, 4.0), 0.1, (1.0, 1.0), profile=profile)
        rep = shale_sweep(grid, (spec,), cutoffs, grid.t_min, grid.t_max)
        print(f"{profile:>5}: fitted slope {rep.tail_decay_exponent:6.2f}  tail fraction {rep.tail_fraction:.2e}  "
              f"passes={rep.passes}")
        for k, nrm, om in rep.csv_rows():
            print(f"       k={int(k):2d}  omega={om:6.3f}  row norm={nrm:.3e}")


if __name__ == "__main__":
    main()
