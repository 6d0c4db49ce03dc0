from prog import data_lines

got = data_lines(["# header", "a", "b"])
assert got == ["a", "b"], f"expected ['a', 'b'], got {got}"
