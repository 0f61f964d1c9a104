from modules.imports import *

def print_warning(message):
    print(f"{Fore.YELLOW}WARNING{Style.RESET_ALL}: {message}")


def print_budget_warning(failure_rates, budget):
    for method, rate in sorted(failure_rates.items()):
        if rate > budget:
            print_warning(f"{method.upper()} failed on {rate:.1%} of its runs, over the {budget:.0%} budget.")
        elif rate > budget / 2:
            print_warning(f"{method.upper()} failed on {rate:.1%} of its runs, close to the {budget:.0%} budget.")


def print_table_fallback_warning(diagnostics):
    sources = diagnostics.lookup_sources
    total = sum(sources.values())
    if total and sources.get("table", 0) < total / 2:
        print_warning(f"Only {sources.get('table', 0)} of {total} QP lookups hit the table. "
                      f"Check the table grid covers your cavities.")
