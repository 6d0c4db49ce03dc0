import sys


def flood():
    step = 0
    while True:
        step += 1
        sys.stdout.write(f"TRQ|{step}|loop|step={step}\n")
