import argparse
import timeit
from typing import Dict

from nkit.elliptic_op import assemble, solve  # noqa: F401 used in timeit
from nkit.grid_core import (CoefficientField, HoelderBump,
                            generate_coefficient, make_domain)
from nkit.neumann_fn import (mollified_source,  # noqa: F401 used in timeit
                             neumann_columns)

coefficients: Dict[str, CoefficientField] = {}
for n in (17, 33, 49):
    domain = make_domain(1.0, n)
    coefficients[str(n)] = generate_coefficient(
        domain, HoelderBump(1.0, 0.5, domain.center, 0.5))

SOURCES = [(0.35, 0.5, 0.5), (0.5, 0.35, 0.5), (0.5, 0.5, 0.35),
           (0.65, 0.5, 0.5)]


def benchmark(name: str,
              names_and_coefficients: Dict[str, CoefficientField],
              first_string: str,
              second_string: str,
              labels=("first", "second"),
              number: int = 3,
              **kwargs):
    print(name)
    print("n\t{0}\t{1}\tratio".format(*labels))
    for name, gamma in names_and_coefficients.items():
        timeit_kwargs = dict(globals=dict(**globals(), **locals()),
                             number=number, **kwargs)
        first_time = timeit.timeit(first_string, **timeit_kwargs)
        second_time = timeit.timeit(second_string, **timeit_kwargs)
        first_millisecs = round(first_time * (1_000 / number), 2)
        second_millisecs = round(second_time * (1_000 / number), 2)
        ratio = round(first_time / second_time, 2)
        print("{0}\t{1}\t{2}\t{3}".format(name,
                                          first_millisecs,
                                          second_millisecs,
                                          ratio))


def argument_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser()
    parser.add_argument("--all", action="store_true")
    parser.add_argument("--assembly", action="store_true")
    parser.add_argument("--solvers", action="store_true")
    parser.add_argument("--columns", action="store_true")
    return parser


if __name__ == "__main__":
    args = argument_parser().parse_args()
    if args.assembly or args.all:
        benchmark("Assembly", coefficients,
                  "assemble(gamma, 1.0)",
                  "assemble(gamma, 1.0, mean='arithmetic')",
                  labels=("harmonic", "arithmetic"))
    if args.solvers or args.all:
        benchmark("Single source solve", coefficients,
                  "solve(assemble(gamma, 1.0), "
                  "mollified_source(gamma.domain, gamma.domain.center, 0.125))",
                  "solve(assemble(gamma, 1.0), "
                  "mollified_source(gamma.domain, gamma.domain.center, 0.125),"
                  " method='direct')",
                  labels=("cocg", "direct"))
        benchmark("Krylov solvers", coefficients,
                  "solve(assemble(gamma, 1.0), "
                  "mollified_source(gamma.domain, gamma.domain.center, 0.125),"
                  " method='bicgstab')",
                  "solve(assemble(gamma, 1.0), "
                  "mollified_source(gamma.domain, gamma.domain.center, 0.125),"
                  " method='gmres')",
                  labels=("bicgstab", "gmres"))
    if args.columns or args.all:
        benchmark("Four Neumann columns", coefficients,
                  "neumann_columns(gamma, 1.0, SOURCES, 0.125)",
                  "neumann_columns(gamma, 1.0, SOURCES, 0.125, threads=4)",
                  labels=("1 thread", "4 threads"))
