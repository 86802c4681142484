#pragma once

// Torch's logging header defines CHECK; the test framework's macro wins.
#undef CHECK
#include "doctest.h"
