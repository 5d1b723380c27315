import cProfile
import sys

from nkit.grid_core import HoelderBump, generate_coefficient, make_domain
from nkit.neumann_fn import neumann_column


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 65
    domain = make_domain(1.0, n)
    gamma = generate_coefficient(
        domain, HoelderBump(1.0, 0.5, domain.center, 0.5))
    neumann_column(gamma, 1.0, domain.center)


if __name__ == "__main__":
    cProfile.run("main()")
