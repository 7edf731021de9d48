from gzsl_moe.seeding import derive_seed, fnv1a64, rng_for, splitmix64


def test_splitmix64_reference():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_fnv1a64_reference():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_derive_seed_composition():
    assert derive_seed(7) == 7
    assert derive_seed(7, "a") == splitmix64(7 ^ fnv1a64(b"a"))
    assert derive_seed(7, "a", 3) == derive_seed(derive_seed(7, "a"), "3")
    assert derive_seed(7, "a") != derive_seed(7, "b")
    assert derive_seed(-1, "x") < 2 ** 64


def test_rng_for_is_reproducible():
    assert rng_for(3, "x").random() == rng_for(3, "x").random()
