import pytest

from helpers import make_market_2asset, make_market_30asset


@pytest.fixture(scope="session")
def market_2asset():
    return make_market_2asset()


@pytest.fixture(scope="session")
def market_30asset():
    return make_market_30asset()
