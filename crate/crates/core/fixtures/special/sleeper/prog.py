import time


def wait_forever():
    time.sleep(3600)
