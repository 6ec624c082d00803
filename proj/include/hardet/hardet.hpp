#pragma once

#include "hardet/config.hpp"
#include "hardet/geom.hpp"
#include "hardet/harness.hpp"
#include "hardet/io.hpp"
#include "hardet/losses.hpp"
#include "hardet/metrics.hpp"
