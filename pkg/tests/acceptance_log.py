"""Result lines of the acceptance suite, printed in the terminal summary."""

LINES = []


def record(number, ok, detail):
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    LINES.append(line)
    print(line)
    return ok
