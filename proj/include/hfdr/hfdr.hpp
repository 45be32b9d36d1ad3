#pragma once

#include "hfdr/analysis.hpp"
#include "hfdr/attacks.hpp"
#include "hfdr/config.hpp"
#include "hfdr/data.hpp"
#include "hfdr/freq_filters.hpp"
#include "hfdr/hfdr_layer.hpp"
#include "hfdr/losses.hpp"
#include "hfdr/models.hpp"
#include "hfdr/train.hpp"
