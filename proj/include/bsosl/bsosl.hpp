#pragma once

#include "bsosl/errors.hpp"
#include "bsosl/rng.hpp"
#include "bsosl/learner.hpp"
#include "bsosl/data.hpp"
#include "bsosl/client.hpp"
#include "bsosl/coordinator.hpp"
#include "bsosl/bsa.hpp"
#include "bsosl/driver.hpp"
