int extra_check(int x) {
    return x == 42;
}
