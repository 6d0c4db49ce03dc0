from prog import sum_first

assert sum_first([5], 1) == 5
assert sum_first([], 0) == 0
assert sum_first([1, 2], 2) == 3
