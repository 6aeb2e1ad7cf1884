#pragma once

#include "crlab/checkpoint.hpp"
#include "crlab/config.hpp"
#include "crlab/data.hpp"
#include "crlab/errors.hpp"
#include "crlab/experiments.hpp"
#include "crlab/gradcheck.hpp"
#include "crlab/losses.hpp"
#include "crlab/metrics.hpp"
#include "crlab/model.hpp"
#include "crlab/numerics.hpp"
#include "crlab/trainer.hpp"
