#pragma once

#include "hardet/harness/gradcheck.hpp"
#include "hardet/harness/model.hpp"
#include "hardet/harness/refinement.hpp"
#include "hardet/harness/scene.hpp"
#include "hardet/harness/train.hpp"
